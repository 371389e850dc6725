//! Cross-model co-learning for test-time adaptation.
//!
//! Two (or more) classifiers of different sizes adapt together on an
//! unlabeled test stream. The auxiliary model's logits are divided by a
//! temperature that is learned online from the logit discrepancy, blended with
//! the anchor's logits under a per-sample rescaling that keeps the anchor's
//! maximum logit, and the blend drives marginal-entropy, cross-model
//! distillation and per-model entropy losses. Only the normalization affine
//! parameters of each model are updated.
//!
//! The crate also carries everything needed to exercise the method at desk
//! scale: a small autodiff engine, a model zoo, synthetic shifted data
//! streams and an experiment harness.

pub mod adaptation;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod io_util;
pub mod models;
pub mod seed;
pub mod shiftgen;

pub use error::{CocaError, Result};
