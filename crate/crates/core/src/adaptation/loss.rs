use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{entropy_of_logits, Tape, Tensor, Var};
use crate::error::{CocaError, Result};
use crate::models::cross_entropy;

/// Per-row entropy of `softmax(z)` as `logsumexp(z) - Σ softmax(z)·z`.
pub(crate) fn entropy_rows(tape: &mut Tape, z: Var) -> Result<Var> {
    let lse = tape.logsumexp_last(z)?;
    let q = tape.softmax_last(z)?;
    let qz = tape.mul(q, z)?;
    let s = tape.sum_last(qz)?;
    tape.sub(lse, s)
}

pub(crate) fn mean_entropy(tape: &mut Tape, z: Var) -> Result<Var> {
    let h = entropy_rows(tape, z)?;
    Ok(tape.mean(h))
}

pub(crate) fn ckd_on(tape: &mut Tape, p_a: Var, p_s: Var, y_hat: &[usize]) -> Result<Var> {
    let a = cross_entropy(tape, p_a, y_hat)?;
    let s = cross_entropy(tape, p_s, y_hat)?;
    tape.add(a, s)
}

pub(crate) fn self_adapt_on(tape: &mut Tape, p_a: Var, p_s: Var) -> Result<Var> {
    let a = mean_entropy(tape, p_a)?;
    let s = mean_entropy(tape, p_s)?;
    tape.add(a, s)
}

fn check_logits(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 || t.rows() == 0 {
        return Err(CocaError::shape(
            op,
            format!("expected non-empty (B, C) logits, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Mean entropy of `softmax(p_e)` over the batch.
pub fn marginal_entropy(p_e: &Tensor) -> Result<f64> {
    check_logits("marginal_entropy", p_e)?;
    Ok((0..p_e.rows())
        .map(|i| entropy_of_logits(p_e.row(i)))
        .sum::<f64>()
        / p_e.rows() as f64)
}

/// Mean over the batch of both models' cross-entropy against `y_hat`.
pub fn ckd_loss(p_a: &Tensor, p_s: &Tensor, y_hat: &[usize]) -> Result<f64> {
    check_logits("ckd_loss", p_a)?;
    if p_a.shape() != p_s.shape() {
        return Err(CocaError::shape(
            "ckd_loss",
            format!("{:?} vs {:?}", p_a.shape(), p_s.shape()),
        ));
    }
    let mut tape = Tape::new();
    let (a, s) = (tape.constant(p_a.clone()), tape.constant(p_s.clone()));
    let l = ckd_on(&mut tape, a, s, y_hat)?;
    Ok(tape.item(l))
}

/// Mean over the batch of both models' own prediction entropy.
pub fn self_adapt_loss(p_a: &Tensor, p_s: &Tensor) -> Result<f64> {
    if p_a.shape() != p_s.shape() {
        return Err(CocaError::shape(
            "self_adapt_loss",
            format!("{:?} vs {:?}", p_a.shape(), p_s.shape()),
        ));
    }
    Ok(marginal_entropy(p_a)? + marginal_entropy(p_s)?)
}

/// Which loss terms enter the objective. Written as terms joined by `+`,
/// e.g. `sa+mar+ckd` (or `full`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LossMask {
    pub sa: bool,
    pub mar: bool,
    pub ckd: bool,
}

impl LossMask {
    pub const FULL: LossMask = LossMask {
        sa: true,
        mar: true,
        ckd: true,
    };

    /// The seven non-empty masks, single terms first.
    pub fn ablation_rows() -> Vec<LossMask> {
        [
            "sa",
            "mar",
            "ckd",
            "mar+ckd",
            "sa+ckd",
            "sa+mar",
            "sa+mar+ckd",
        ]
        .iter()
        .map(|s| s.parse().expect("valid mask literal"))
        .collect()
    }
}

impl Default for LossMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl fmt::Display for LossMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let terms: Vec<&str> = [(self.sa, "sa"), (self.mar, "mar"), (self.ckd, "ckd")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&terms.join("+"))
    }
}

impl FromStr for LossMask {
    type Err = CocaError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(Self::FULL);
        }
        let mut m = LossMask {
            sa: false,
            mar: false,
            ckd: false,
        };
        for term in s.split('+').map(str::trim) {
            let slot = match term {
                "sa" => &mut m.sa,
                "mar" => &mut m.mar,
                "ckd" => &mut m.ckd,
                other => {
                    return Err(CocaError::Config(format!(
                        "unknown loss term '{other}' in mask '{s}'"
                    )))
                }
            };
            if *slot {
                return Err(CocaError::Config(format!(
                    "loss term '{term}' repeated in mask '{s}'"
                )));
            }
            *slot = true;
        }
        Ok(m)
    }
}

impl TryFrom<String> for LossMask {
    type Error = CocaError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossMask> for String {
    fn from(m: LossMask) -> String {
        m.to_string()
    }
}

/// EATA-style confidence filter on the ensemble prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub enabled: bool,
    /// Samples are kept when their entropy is below `threshold_factor · ln C`.
    pub threshold_factor: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            threshold_factor: 0.4,
        }
    }
}

impl FilterConfig {
    pub fn threshold(&self, num_classes: usize) -> f64 {
        self.threshold_factor * (num_classes as f64).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.threshold_factor.is_finite() && self.threshold_factor > 0.0) {
            return Err(CocaError::Config(format!(
                "filter threshold_factor must be > 0, got {}",
                self.threshold_factor
            )));
        }
        Ok(())
    }

    /// Indices of rows to keep; every row when disabled.
    pub fn keep(&self, logits: &Tensor) -> Vec<usize> {
        let n = logits.rows();
        if !self.enabled {
            return (0..n).collect();
        }
        let th = self.threshold(logits.row_width());
        (0..n)
            .filter(|&i| entropy_of_logits(logits.row(i)) < th)
            .collect()
    }
}

/// Loss values of one step. Masked-out terms are reported as 0, so
/// `l_total = lambda_col · (l_mar + l_ckd) + l_sa` always holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mar: f64,
    pub l_ckd: f64,
    pub l_sa: f64,
    pub l_total: f64,
    pub lambda_col: f64,
}

impl LossBreakdown {
    pub(crate) fn add(&mut self, other: &LossBreakdown) {
        self.l_mar += other.l_mar;
        self.l_ckd += other.l_ckd;
        self.l_sa += other.l_sa;
        self.l_total += other.l_total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert!((marginal_entropy(&t(&[vec![0.0; 4]])).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(marginal_entropy(&t(&[vec![100.0, 0.0, 0.0, 0.0]])).unwrap() < 1e-40);
        assert!((marginal_entropy(&t(&[vec![1.0, 0.0]])).unwrap() - 0.582203).abs() < 1e-6);
    }

    #[test]
    fn entropy_on_tape_matches_values() {
        let z = t(&[vec![0.3, -1.2, 2.0], vec![5.0, 5.0, -3.0]]);
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let h = mean_entropy(&mut tape, v).unwrap();
        assert!((tape.item(h) - marginal_entropy(&z).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ckd_values() {
        let l = ckd_loss(&t(&[vec![2.0, 0.0]]), &t(&[vec![1.0, 4.0]]), &[1]).unwrap();
        assert!((l - 2.175515).abs() < 1e-6);
        let sharp = t(&[vec![50.0, 0.0]]);
        assert!(ckd_loss(&sharp, &sharp, &[0]).unwrap() < 1e-12);
        assert!(ckd_loss(&sharp, &sharp, &[2]).is_err());
    }

    #[test]
    fn self_adapt_values() {
        let l = self_adapt_loss(&t(&[vec![0.0, 0.0]]), &t(&[vec![1.0, 0.0]])).unwrap();
        assert!((l - 1.275350).abs() < 1e-6);
        let u = t(&[vec![0.0; 4]]);
        assert!((self_adapt_loss(&u, &u).unwrap() - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mask_parsing() {
        assert_eq!("full".parse::<LossMask>().unwrap(), LossMask::FULL);
        assert_eq!("ckd+sa".parse::<LossMask>().unwrap().to_string(), "sa+ckd");
        assert!("sa+sa".parse::<LossMask>().is_err());
        assert!("entropy".parse::<LossMask>().is_err());
        assert!("".parse::<LossMask>().is_err());
        assert_eq!(LossMask::ablation_rows().len(), 7);
        let json = serde_json::to_string(&LossMask::FULL).unwrap();
        assert_eq!(json, "\"sa+mar+ckd\"");
    }

    #[test]
    fn filter_threshold() {
        let f = FilterConfig {
            enabled: true,
            ..FilterConfig::default()
        };
        let z = t(&[vec![0.0; 8], vec![10.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        assert_eq!(f.keep(&z), vec![1]);
        assert_eq!(FilterConfig::default().keep(&z), vec![0, 1]);
    }
}
