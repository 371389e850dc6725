use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{CocaError, Result};

/// How anchor and scaled auxiliary logits are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// `(p_a + p_s/τ) / T` with `T` restoring the anchor's per-sample max logit.
    #[default]
    TScaled,
    /// `(p_a + p_s/τ) / 2`.
    Average,
}

/// One batch's ensemble, as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub p_a: Tensor,
    pub p_s: Tensor,
    pub p_e_prime: Tensor,
    /// Per-sample divisor applied to `p_e_prime`.
    pub t: Vec<f64>,
    pub p_e: Tensor,
    pub y_hat: Vec<usize>,
}

pub(crate) struct TapeEnsemble {
    pub p_e_prime: Var,
    pub p_e: Var,
    pub t: Vec<f64>,
}

/// Records the ensemble on `tape`. τ is a constant; `T` is differentiated
/// through both per-sample maxima except where the guard fixes it to 1.
pub(crate) fn ensemble_on(
    tape: &mut Tape,
    p_a: Var,
    p_s: Var,
    tau: f64,
    mode: EnsembleMode,
) -> Result<TapeEnsemble> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CocaError::invalid(format!(
            "tau must be positive and finite, got {tau}"
        )));
    }
    let (sa, ss) = (tape.shape(p_a), tape.shape(p_s));
    if sa != ss || sa.len() != 2 {
        return Err(CocaError::shape(
            "ensemble",
            format!("anchor {sa:?} vs auxiliary {ss:?}"),
        ));
    }
    let b = sa[0];
    let scaled = tape.scalar_div(p_s, tau)?;
    let p_e_prime = tape.add(p_a, scaled)?;
    match mode {
        EnsembleMode::Average => {
            let p_e = tape.scalar_div(p_e_prime, 2.0)?;
            Ok(TapeEnsemble {
                p_e_prime,
                p_e,
                t: vec![2.0; b],
            })
        }
        EnsembleMode::TScaled => {
            let max_a = tape.max_last(p_a)?;
            let max_e = tape.max_last(p_e_prime)?;
            let mask: Vec<f64> = tape
                .value(max_a)
                .iter()
                .zip(tape.value(max_e))
                .map(|(&a, &e)| if a > 0.0 && e > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let rest: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
            let mask = tape.constant(Tensor::new(vec![b], mask)?);
            let rest = tape.constant(Tensor::new(vec![b], rest)?);
            let num = tape.mul(max_e, mask)?;
            let num = tape.add(num, rest)?;
            let den = tape.mul(max_a, mask)?;
            let den = tape.add(den, rest)?;
            let t: Vec<f64> = tape
                .value(num)
                .iter()
                .zip(tape.value(den))
                .map(|(n, d)| n / d)
                .collect();
            let inv_t = tape.div(den, num)?;
            let p_e = tape.mul_rows(p_e_prime, inv_t)?;
            Ok(TapeEnsemble { p_e_prime, p_e, t })
        }
    }
}

/// Ensemble of detached logits.
pub fn ensemble(
    p_a: &Tensor,
    p_s: &Tensor,
    tau: f64,
    mode: EnsembleMode,
) -> Result<EnsembleOutput> {
    let mut tape = Tape::new();
    let a = tape.constant(p_a.clone());
    let s = tape.constant(p_s.clone());
    let e = ensemble_on(&mut tape, a, s, tau, mode)?;
    let p_e = tape.tensor(e.p_e);
    Ok(EnsembleOutput {
        p_a: p_a.clone(),
        p_s: p_s.clone(),
        p_e_prime: tape.tensor(e.p_e_prime),
        t: e.t,
        y_hat: p_e.argmax_rows(),
        p_e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn zero_auxiliary_is_identity() {
        let a = t(&[vec![3.0, 1.0, -1.0]]);
        let e = ensemble(&a, &Tensor::zeros(vec![1, 3]), 1.7, EnsembleMode::TScaled).unwrap();
        assert_eq!(e.t, vec![1.0]);
        assert_eq!(e.p_e.data(), a.data());
    }

    #[test]
    fn worked_example() {
        let e = ensemble(
            &t(&[vec![3.0, 1.0]]),
            &t(&[vec![2.0, 4.0]]),
            2.0,
            EnsembleMode::TScaled,
        )
        .unwrap();
        assert_eq!(e.p_e_prime.data(), &[4.0, 3.0]);
        assert!((e.t[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((e.p_e.data()[0] - 3.0).abs() < 1e-12);
        assert!((e.p_e.data()[1] - 2.25).abs() < 1e-12);
        assert_eq!(e.y_hat, vec![0]);
    }

    #[test]
    fn averaging_mode() {
        let e = ensemble(
            &t(&[vec![1.6, 0.0]]),
            &t(&[vec![9.8, 0.0]]),
            1.0,
            EnsembleMode::Average,
        )
        .unwrap();
        assert!((e.p_e.data()[0] - 5.7).abs() < 1e-12);
    }

    #[test]
    fn guard_and_ties() {
        let e = ensemble(
            &t(&[vec![-1.0, -2.0], vec![1.0, 2.0]]),
            &t(&[vec![5.0, 0.0], vec![-9.0, -9.0]]),
            1.0,
            EnsembleMode::TScaled,
        )
        .unwrap();
        assert_eq!(e.t, vec![1.0, 1.0]);
        let e = ensemble(
            &t(&[vec![3.0, 3.0]]),
            &t(&[vec![0.0, 0.0]]),
            1.0,
            EnsembleMode::TScaled,
        )
        .unwrap();
        assert_eq!(e.y_hat, vec![0]);
    }

    #[test]
    fn rejects_bad_tau_and_shapes() {
        let a = t(&[vec![1.0, 2.0]]);
        assert!(ensemble(&a, &a, 0.0, EnsembleMode::TScaled).is_err());
        assert!(ensemble(&a, &a, f64::NAN, EnsembleMode::TScaled).is_err());
        assert!(ensemble(&a, &t(&[vec![1.0, 2.0, 3.0]]), 1.0, EnsembleMode::TScaled).is_err());
    }
}
