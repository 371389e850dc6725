use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CocaError, Result};

/// Hyperparameters of the temperature update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TauConfig {
    /// Descent steps per batch. `0` keeps τ at its initial value.
    pub steps: usize,
    /// Initial trial step length on ln τ.
    pub step_size: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    /// Logits are clipped to `[-clamp, clamp]` before exponentiation.
    pub clamp: f64,
}

impl Default for TauConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            step_size: 0.5,
            tau_min: 1e-2,
            tau_max: 1e3,
            clamp: 20.0,
        }
    }
}

impl TauConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.tau_min > 0.0
            && self.tau_min <= 1.0
            && self.tau_max >= 1.0
            && self.clamp > 0.0
            && [self.step_size, self.tau_max, self.clamp]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(CocaError::Config(format!(
                "tau settings need step_size > 0, 0 < tau_min <= 1 <= tau_max, clamp > 0; got {self:?}"
            )))
        }
    }
}

/// The learnable temperature and its per-batch history.
#[derive(Clone, Debug, PartialEq)]
pub struct TauState {
    pub tau: f64,
    pub config: TauConfig,
    pub trajectory: Vec<f64>,
}

impl TauState {
    pub fn new(config: TauConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            tau: 1.0,
            config,
            trajectory: Vec::new(),
        })
    }

    fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.config.tau_min, self.config.tau_max)
    }
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<usize> {
    if a.shape() != b.shape() || a.rank() != 2 || a.rows() == 0 {
        return Err(CocaError::shape(
            op,
            format!("anchor {:?} vs auxiliary {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.rows())
}

/// Mean over the batch of `Σ_c |exp(clip(p_a)) - exp(clip(p_s_scaled))|`.
pub fn tau_discrepancy(p_a: &Tensor, p_s_scaled: &Tensor, clamp: f64) -> Result<f64> {
    let b = check_pair("tau_discrepancy", p_a, p_s_scaled)?;
    let sum: f64 = p_a
        .data()
        .iter()
        .zip(p_s_scaled.data())
        .map(|(a, s)| (a.clamp(-clamp, clamp).exp() - s.clamp(-clamp, clamp).exp()).abs())
        .sum();
    Ok(sum / b as f64)
}

fn discrepancy_at(p_a: &[f64], p_s: &[f64], tau: f64, clamp: f64, b: usize) -> f64 {
    p_a.iter()
        .zip(p_s)
        .map(|(a, s)| (a.clamp(-clamp, clamp).exp() - (s / tau).clamp(-clamp, clamp).exp()).abs())
        .sum::<f64>()
        / b as f64
}

fn gradient_at(p_a: &[f64], p_s: &[f64], tau: f64, clamp: f64, b: usize) -> f64 {
    p_a.iter()
        .zip(p_s)
        .map(|(a, s)| {
            let x = s / tau;
            if x.abs() >= clamp {
                return 0.0;
            }
            let d = a.clamp(-clamp, clamp).exp() - x.exp();
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            // d|e^a - e^{s/τ}|/dτ = sign(d) · e^{s/τ} · s / τ²
            sign * x.exp() * s / (tau * tau)
        })
        .sum::<f64>()
        / b as f64
}

/// `d/dτ tau_discrepancy(p_a, p_s / τ)`, zero where the clip is active.
pub fn tau_gradient(p_a: &Tensor, p_s: &Tensor, tau: f64, clamp: f64) -> Result<f64> {
    let b = check_pair("tau_gradient", p_a, p_s)?;
    if tau <= 0.0 {
        return Err(CocaError::invalid(format!(
            "tau must be positive, got {tau}"
        )));
    }
    Ok(gradient_at(p_a.data(), p_s.data(), tau, clamp, b))
}

/// Runs `config.steps` descent steps on ln τ against detached logits and
/// records the resulting τ.
///
/// Each step moves ln τ against the sign of the gradient by `step_size`,
/// halving the step until the discrepancy decreases; a step that finds no
/// decrease leaves τ unchanged. τ is clamped to its bounds after every step.
pub fn learn_tau(state: &mut TauState, p_a: &Tensor, p_s: &Tensor) -> Result<f64> {
    let b = check_pair("learn_tau", p_a, p_s)?;
    let clamp = state.config.clamp;
    let (a, s) = (p_a.data(), p_s.data());
    for _ in 0..state.config.steps {
        let tau = state.tau;
        let g = gradient_at(a, s, tau, clamp, b) * tau;
        if g == 0.0 || !g.is_finite() {
            break;
        }
        let current = discrepancy_at(a, s, tau, clamp, b);
        let dir = -g.signum();
        let mut len = state.config.step_size;
        let mut next = tau;
        for _ in 0..40 {
            let trial = state.clamp((tau.ln() + dir * len).exp());
            if discrepancy_at(a, s, trial, clamp, b) < current {
                next = trial;
                break;
            }
            len *= 0.5;
        }
        state.tau = state.clamp(next);
    }
    state.trajectory.push(state.tau);
    Ok(state.tau)
}
