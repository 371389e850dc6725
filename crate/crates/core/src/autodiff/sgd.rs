use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{CocaError, Result};

/// Stochastic gradient descent with heavy-ball momentum.
///
/// `v <- momentum * v + grad; param <- param - lr * v`. Velocity buffers are
/// keyed by parameter name, start at zero and live as long as the optimizer.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(CocaError::invalid(format!(
                "learning rate must be >= 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(CocaError::invalid(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every `(name, param)` and clears their grads.
    ///
    /// All grads are checked before anything is modified, so a missing grad
    /// leaves parameters and velocities untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    ) -> Result<()> {
        let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, p)| p.grad().is_none()) {
            return Err(CocaError::invalid(format!(
                "sgd_step: parameter {name} has no gradient"
            )));
        }
        for (name, p) in params {
            let g = p.take_grad().expect("checked above");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, gi), w) in v.iter_mut().zip(&g).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
        Ok(())
    }
}
