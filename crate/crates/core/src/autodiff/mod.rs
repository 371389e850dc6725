//! Reverse-mode differentiation over dense float64 tensors and the SGD
//! optimizer used for both pretraining and adaptation.

mod sgd;
mod tape;
mod tensor;

pub use sgd::Sgd;
pub use tape::{entropy_of_logits, logsumexp, softmax, Gradients, OpKind, Tape, Var, NORM_EPS};
pub use tensor::{argmax, Tensor};
