use serde::{Deserialize, Serialize};

use super::ensemble::{ensemble_on, EnsembleMode, EnsembleOutput};
use super::loss::{ckd_on, mean_entropy, self_adapt_on, FilterConfig, LossBreakdown, LossMask};
use super::tau::{learn_tau, TauState};
use crate::autodiff::{Sgd, Tape, Tensor, Var};
use crate::error::{CocaError, Result};
use crate::models::{Forward, Model, Trainable};

/// A model with its own optimizer over the normalization affines.
#[derive(Clone, Debug)]
pub struct Learner {
    pub model: Model,
    pub opt: Sgd,
}

impl Learner {
    pub fn new(model: Model, lr: f64, momentum: f64) -> Result<Self> {
        Ok(Self {
            model,
            opt: Sgd::new(lr, momentum)?,
        })
    }

    fn update(&mut self) -> Result<()> {
        let names = self.model.norm_param_names().to_vec();
        let params = self.model.params_for_update(&names);
        self.opt.step(params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CocaConfig {
    /// Weight of the co-adaptation terms relative to self-adaptation.
    pub lambda_col: f64,
    pub mask: LossMask,
    pub filter: FilterConfig,
    pub mode: EnsembleMode,
}

impl Default for CocaConfig {
    fn default() -> Self {
        Self {
            lambda_col: 1.0,
            mask: LossMask::FULL,
            filter: FilterConfig::default(),
            mode: EnsembleMode::TScaled,
        }
    }
}

impl CocaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_col.is_finite() && self.lambda_col >= 0.0) {
            return Err(CocaError::Config(format!(
                "lambda_col must be >= 0, got {}",
                self.lambda_col
            )));
        }
        self.filter.validate()
    }
}

/// Result of one co-adaptation step. Predictions come from the forward pass
/// that drove the update.
#[derive(Clone, Debug)]
pub struct CocaOutput {
    /// Top-level ensemble: the largest model against everything below it.
    pub ensemble: EnsembleOutput,
    /// Each model's own argmax, in model order.
    pub predictions: Vec<Vec<usize>>,
    /// Summed over cascade levels.
    pub losses: LossBreakdown,
    /// τ of every level after this batch, top level first.
    pub taus: Vec<f64>,
    /// Samples that passed the top-level filter.
    pub kept: usize,
    pub updated: bool,
}

impl CocaOutput {
    pub fn combined(&self) -> &[usize] {
        &self.ensemble.y_hat
    }
}

/// Single-model entropy minimization step.
#[derive(Clone, Debug)]
pub struct TentOutput {
    pub logits: Tensor,
    pub predictions: Vec<usize>,
    pub entropy: f64,
}

fn forward_all(tape: &mut Tape, learners: &[&mut Learner], x: Var) -> Result<Vec<Forward>> {
    learners
        .iter()
        .map(|l| l.model.forward(tape, x, Trainable::NormOnly))
        .collect()
}

fn scaled(tape: &mut Tape, v: Var, w: f64) -> Result<Var> {
    let w = tape.constant(Tensor::scalar(w));
    tape.mul(v, w)
}

fn cascade(
    learners: &mut [&mut Learner],
    taus: &mut [&mut TauState],
    features: &Tensor,
    cfg: &CocaConfig,
) -> Result<CocaOutput> {
    cfg.validate()?;
    let n = learners.len();
    if n < 2 || taus.len() != n - 1 {
        return Err(CocaError::invalid(format!(
            "co-adaptation needs at least 2 models and one tau per pairing, got {n} models and {} taus",
            taus.len()
        )));
    }
    let classes = learners[0].model.num_classes();
    if learners.iter().any(|l| l.model.num_classes() != classes) {
        return Err(CocaError::invalid(
            "all models must predict the same number of classes",
        ));
    }
    if learners
        .windows(2)
        .any(|w| w[0].model.param_count() < w[1].model.param_count())
    {
        return Err(CocaError::invalid(
            "models must be ordered by parameter count, largest first",
        ));
    }

    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let fwds = forward_all(&mut tape, learners, x)?;
    let predictions: Vec<Vec<usize>> = fwds
        .iter()
        .map(|f| tape.tensor(f.logits).argmax_rows())
        .collect();

    let mut aux = fwds[n - 1].logits;
    let mut total: Option<Var> = None;
    let mut losses = LossBreakdown {
        lambda_col: cfg.lambda_col,
        ..LossBreakdown::default()
    };
    let mut top = None;
    let mut kept = 0;
    for level in (0..n - 1).rev() {
        let anchor = fwds[level].logits;
        let (p_a, p_s) = (tape.tensor(anchor), tape.tensor(aux));
        let tau = learn_tau(taus[level], &p_a, &p_s)?;
        let ens = ensemble_on(&mut tape, anchor, aux, tau, cfg.mode)?;
        let p_e = tape.tensor(ens.p_e);
        let y_hat = p_e.argmax_rows();
        let keep = cfg.filter.keep(&p_e);
        if !keep.is_empty() {
            let (a, s, e, y) = if keep.len() == y_hat.len() {
                (anchor, aux, ens.p_e, y_hat.clone())
            } else {
                (
                    tape.select_rows(anchor, &keep)?,
                    tape.select_rows(aux, &keep)?,
                    tape.select_rows(ens.p_e, &keep)?,
                    keep.iter().map(|&i| y_hat[i]).collect(),
                )
            };
            let mut level_loss = LossBreakdown::default();
            let mut col: Option<Var> = None;
            if cfg.mask.mar {
                let v = mean_entropy(&mut tape, e)?;
                level_loss.l_mar = tape.item(v);
                col = Some(v);
            }
            if cfg.mask.ckd {
                let v = ckd_on(&mut tape, a, s, &y)?;
                level_loss.l_ckd = tape.item(v);
                col = Some(match col {
                    Some(c) => tape.add(c, v)?,
                    None => v,
                });
            }
            let mut level_total = match col {
                Some(c) => Some(scaled(&mut tape, c, cfg.lambda_col)?),
                None => None,
            };
            if cfg.mask.sa {
                let v = self_adapt_on(&mut tape, a, s)?;
                level_loss.l_sa = tape.item(v);
                level_total = Some(match level_total {
                    Some(t) => tape.add(t, v)?,
                    None => v,
                });
            }
            if let Some(t) = level_total {
                level_loss.l_total = tape.item(t);
                losses.add(&level_loss);
                total = Some(match total {
                    Some(acc) => tape.add(acc, t)?,
                    None => t,
                });
            }
        }
        let next_aux = ens.p_e;
        if level == 0 {
            top = Some(EnsembleOutput {
                p_a,
                p_s,
                p_e_prime: tape.tensor(ens.p_e_prime),
                t: ens.t,
                p_e,
                y_hat,
            });
            kept = keep.len();
        }
        aux = next_aux;
    }
    let ensemble = top.expect("at least one level");

    let updated = match total {
        Some(loss) if learners.iter().any(|l| l.opt.lr() > 0.0) => {
            let grads = tape.backward(loss)?;
            for (l, f) in learners.iter_mut().zip(&fwds) {
                l.model.accumulate_grads(&grads, f)?;
            }
            for l in learners.iter_mut() {
                l.update()?;
            }
            true
        }
        _ => false,
    };
    Ok(CocaOutput {
        ensemble,
        predictions,
        losses,
        taus: taus.iter().map(|t| t.tau).collect(),
        kept,
        updated,
    })
}

/// One online co-adaptation step of an anchor and an auxiliary model.
///
/// The auxiliary's logits are scaled by the learned τ, combined with the
/// anchor's, and both models' normalization affines take one SGD step on
/// `lambda_col · (L_mar + L_ckd) + L_sa`. Labels are never seen.
pub fn coca_step(
    anchor: &mut Learner,
    aux: &mut Learner,
    tau: &mut TauState,
    features: &Tensor,
    cfg: &CocaConfig,
) -> Result<CocaOutput> {
    cascade(&mut [anchor, aux], &mut [tau], features, cfg)
}

/// Co-adaptation of three or more models ordered largest first. The two
/// smallest form a pair whose ensemble serves as the auxiliary of the next
/// larger model, up to the first; every pairing keeps its own τ (`taus[i]`
/// pairs model `i` with the ensemble below it) and the losses of all
/// pairings are summed. Two models reduce to [`coca_step`].
pub fn multi_model_coca(
    learners: &mut [Learner],
    taus: &mut [TauState],
    features: &Tensor,
    cfg: &CocaConfig,
) -> Result<CocaOutput> {
    let mut ls: Vec<&mut Learner> = learners.iter_mut().collect();
    let mut ts: Vec<&mut TauState> = taus.iter_mut().collect();
    cascade(&mut ls, &mut ts, features, cfg)
}

/// Entropy minimization on one model's own predictions.
pub fn tent_step(learner: &mut Learner, features: &Tensor) -> Result<TentOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let fwd = learner.model.forward(&mut tape, x, Trainable::NormOnly)?;
    let logits = tape.tensor(fwd.logits);
    let h = mean_entropy(&mut tape, fwd.logits)?;
    let entropy = tape.item(h);
    if learner.opt.lr() > 0.0 {
        let grads = tape.backward(h)?;
        learner.model.accumulate_grads(&grads, &fwd)?;
        learner.update()?;
    }
    Ok(TentOutput {
        predictions: logits.argmax_rows(),
        logits,
        entropy,
    })
}
