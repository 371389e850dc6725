//! Test-time co-adaptation: temperature learning, the T-scaled ensemble, the
//! three losses, the combined step, the Tent baseline and the cascade for
//! three or more models.

mod ensemble;
mod loss;
mod step;
mod tau;

pub use ensemble::{ensemble, EnsembleMode, EnsembleOutput};
pub use loss::{
    ckd_loss, marginal_entropy, self_adapt_loss, FilterConfig, LossBreakdown, LossMask,
};
pub use step::{
    coca_step, multi_model_coca, tent_step, CocaConfig, CocaOutput, Learner, TentOutput,
};
pub use tau::{learn_tau, tau_discrepancy, tau_gradient, TauConfig, TauState};
