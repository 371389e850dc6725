mod common;

use coca::adaptation::{
    coca_step, multi_model_coca, tent_step, CocaConfig, FilterConfig, Learner, LossMask, TauConfig,
    TauState,
};
use coca::autodiff::Tensor;
use coca::models::{Model, ModelSpec, NormKind};
use common::{rng, uniform};

const C: usize = 5;
const D: usize = 6;

fn model(hidden: &[usize], norm: NormKind, seed: u64) -> Model {
    Model::build(ModelSpec::mlp(D, hidden, norm, C), seed).unwrap()
}

fn pair(lr: f64) -> (Learner, Learner) {
    (
        Learner::new(model(&[24, 24], NormKind::Layernorm, 1), lr, 0.9).unwrap(),
        Learner::new(model(&[8], NormKind::Batchnorm, 2), lr, 0.9).unwrap(),
    )
}

fn batch(seed: u64) -> Tensor {
    uniform(&mut rng(seed), vec![16, D], -2.0, 2.0)
}

fn tau_state() -> TauState {
    TauState::new(TauConfig::default()).unwrap()
}

// Plain-float oracle.

fn softmax(r: &[f64]) -> Vec<f64> {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn entropy(r: &[f64]) -> f64 {
    softmax(r)
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum()
}

fn xent(r: &[f64], y: usize) -> f64 {
    -softmax(r)[y].ln()
}

fn first_argmax(r: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best
}

fn mean_rows(t: &Tensor, f: impl Fn(&[f64]) -> f64) -> f64 {
    (0..t.rows()).map(|i| f(t.row(i))).sum::<f64>() / t.rows() as f64
}

/// Per-row balanced ensemble `(p_a + p_s/τ) / T`.
fn oracle_ensemble(pa: &Tensor, ps: &Tensor, tau: f64) -> Tensor {
    let mut rows = Vec::new();
    for i in 0..pa.rows() {
        let prime: Vec<f64> = pa
            .row(i)
            .iter()
            .zip(ps.row(i))
            .map(|(a, s)| a + s / tau)
            .collect();
        let ma = pa.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let me = prime.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let t = if ma > 0.0 && me > 0.0 { me / ma } else { 1.0 };
        rows.push(prime.iter().map(|v| v / t).collect());
    }
    Tensor::from_rows(&rows).unwrap()
}

/// `(L_mar, L_ckd, L_sa)` of one pairing.
fn oracle_losses(pa: &Tensor, ps: &Tensor, pe: &Tensor) -> (f64, f64, f64) {
    let mar = mean_rows(pe, entropy);
    let ckd = (0..pa.rows())
        .map(|i| {
            let y = first_argmax(pe.row(i));
            xent(pa.row(i), y) + xent(ps.row(i), y)
        })
        .sum::<f64>()
        / pa.rows() as f64;
    let sa = mean_rows(pa, entropy) + mean_rows(ps, entropy);
    (mar, ckd, sa)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn losses_match_the_oracle() {
    let (mut a, mut s) = (pair(0.0).0, pair(0.0).1);
    let x = batch(3);
    let pa = a.model.forward_logits(&x).unwrap();
    let ps = s.model.forward_logits(&x).unwrap();
    for lambda in [0.0, 0.3, 1.0, 2.5] {
        let cfg = CocaConfig {
            lambda_col: lambda,
            ..CocaConfig::default()
        };
        let out = coca_step(&mut a, &mut s, &mut tau_state(), &x, &cfg).unwrap();
        let pe = oracle_ensemble(&pa, &ps, out.taus[0]);
        let (mar, ckd, sa) = oracle_losses(&pa, &ps, &pe);
        let l = out.losses;
        assert!(
            close(l.l_mar, mar, 1e-12) && close(l.l_ckd, ckd, 1e-12) && close(l.l_sa, sa, 1e-12)
        );
        assert!(close(l.l_total, lambda * (mar + ckd) + sa, 1e-12));
        for i in 0..x.rows() {
            for (p, q) in out.ensemble.p_e.row(i).iter().zip(pe.row(i)) {
                assert!(close(*p, *q, 1e-12));
            }
            assert_eq!(out.combined()[i], first_argmax(pe.row(i)));
        }
    }
}

#[test]
fn masked_terms_report_zero() {
    let (mut a, mut s) = pair(0.0);
    let x = batch(4);
    for mask in LossMask::ablation_rows() {
        let cfg = CocaConfig {
            mask,
            ..CocaConfig::default()
        };
        let l = coca_step(&mut a, &mut s, &mut tau_state(), &x, &cfg)
            .unwrap()
            .losses;
        assert_eq!(l.l_mar == 0.0, !mask.mar, "{mask}");
        assert_eq!(l.l_ckd == 0.0, !mask.ckd, "{mask}");
        assert_eq!(l.l_sa == 0.0, !mask.sa, "{mask}");
        assert!(close(
            l.l_total,
            l.lambda_col * (l.l_mar + l.l_ckd) + l.l_sa,
            1e-12
        ));
    }
}

#[test]
fn only_normalization_affines_move() {
    let (mut a, mut s) = pair(0.05);
    let (a0, s0) = (a.model.clone(), s.model.clone());
    let out = coca_step(
        &mut a,
        &mut s,
        &mut tau_state(),
        &batch(5),
        &CocaConfig::default(),
    )
    .unwrap();
    assert!(out.updated);
    for (before, after) in [(&a0, &a.model), (&s0, &s.model)] {
        let mut moved = 0;
        for (name, p) in before.params() {
            let changed = p.data() != after.param(name).unwrap().data();
            let is_norm = before.norm_param_names().iter().any(|n| n == name);
            assert!(!changed || is_norm, "{name} changed");
            moved += usize::from(changed);
        }
        assert!(moved > 0);
    }
}

#[test]
fn zero_learning_rate_is_inert() {
    let (mut a, mut s) = pair(0.0);
    let (a0, s0) = (a.model.clone(), s.model.clone());
    let x = batch(6);
    let out = coca_step(&mut a, &mut s, &mut tau_state(), &x, &CocaConfig::default()).unwrap();
    assert!(!out.updated);
    assert_eq!(
        out.predictions[0],
        a0.forward_logits(&x).unwrap().argmax_rows()
    );
    assert_eq!(
        out.predictions[1],
        s0.forward_logits(&x).unwrap().argmax_rows()
    );
    for (name, p) in a0.params() {
        assert_eq!(p.data(), a.model.param(name).unwrap().data());
    }
}

#[test]
fn collaboration_off_reduces_to_tent() {
    let x = batch(7);
    let (mut a, mut s) = pair(0.01);
    let (mut ta, mut ts) = (a.clone(), s.clone());
    let cfg = CocaConfig {
        lambda_col: 0.0,
        ..CocaConfig::default()
    };
    let out = coca_step(&mut a, &mut s, &mut tau_state(), &x, &cfg).unwrap();
    let ea = tent_step(&mut ta, &x).unwrap().entropy;
    let es = tent_step(&mut ts, &x).unwrap().entropy;
    assert!((out.losses.l_total - (ea + es)).abs() < 1e-12);
    for (name, p) in ta.model.params() {
        let q = a.model.param(name).unwrap();
        assert!(
            p.data()
                .iter()
                .zip(q.data())
                .all(|(u, v)| (u - v).abs() < 1e-12),
            "{name}"
        );
    }
}

#[test]
fn identical_models_keep_unit_temperature() {
    let m = model(&[10], NormKind::Layernorm, 9);
    let mut a = Learner::new(m.clone(), 0.0, 0.9).unwrap();
    let mut s = Learner::new(m, 0.0, 0.9).unwrap();
    let x = batch(8);
    let out = coca_step(&mut a, &mut s, &mut tau_state(), &x, &CocaConfig::default()).unwrap();
    assert!((out.taus[0] - 1.0).abs() < 1e-9);
    let pa = a.model.forward_logits(&x).unwrap();
    for i in 0..x.rows() {
        let ma = pa.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if ma > 0.0 {
            for (e, v) in out.ensemble.p_e.row(i).iter().zip(pa.row(i)) {
                assert!((e - v).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn filter_keeps_confident_rows() {
    let (mut a, mut s) = pair(0.0);
    let x = uniform(&mut rng(10), vec![32, D], -6.0, 6.0);
    let probe = coca_step(&mut a, &mut s, &mut tau_state(), &x, &CocaConfig::default()).unwrap();
    let mut h: Vec<f64> = (0..x.rows())
        .map(|i| entropy(probe.ensemble.p_e.row(i)))
        .collect();
    h.sort_by(f64::total_cmp);
    let factor = h[x.rows() / 2] / (C as f64).ln();
    let filter = FilterConfig {
        enabled: true,
        threshold_factor: factor,
    };
    let cfg = CocaConfig {
        filter,
        ..CocaConfig::default()
    };
    let out = coca_step(&mut a, &mut s, &mut tau_state(), &x, &cfg).unwrap();
    let th = factor * (C as f64).ln();
    let expected = (0..x.rows())
        .filter(|&i| entropy(out.ensemble.p_e.row(i)) < th)
        .count();
    assert_eq!(out.kept, expected);
    assert!(expected > 0 && expected < x.rows(), "{expected}");

    let never = CocaConfig {
        filter: FilterConfig {
            enabled: true,
            threshold_factor: 1e-12,
        },
        ..CocaConfig::default()
    };
    let (mut a, mut s) = pair(0.1);
    let before = a.model.clone();
    let out = coca_step(&mut a, &mut s, &mut tau_state(), &x, &never).unwrap();
    assert_eq!(out.kept, 0);
    assert!(!out.updated);
    assert_eq!(out.losses.l_total, 0.0);
    for (name, p) in before.params() {
        assert_eq!(p.data(), a.model.param(name).unwrap().data());
    }
}

#[test]
fn a_small_step_lowers_the_objective() {
    let x = batch(11);
    let fixed = TauConfig {
        steps: 0,
        ..TauConfig::default()
    };
    let cfg = CocaConfig::default();
    let measure = |a: &Learner, s: &Learner| {
        let mut a = Learner::new(a.model.clone(), 0.0, 0.9).unwrap();
        let mut s = Learner::new(s.model.clone(), 0.0, 0.9).unwrap();
        let mut t = TauState::new(fixed.clone()).unwrap();
        coca_step(&mut a, &mut s, &mut t, &x, &cfg)
            .unwrap()
            .losses
            .l_total
    };
    let (mut a, mut s) = pair(1e-3);
    let before = measure(&a, &s);
    coca_step(
        &mut a,
        &mut s,
        &mut TauState::new(fixed.clone()).unwrap(),
        &x,
        &cfg,
    )
    .unwrap();
    let after = measure(&a, &s);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn three_model_cascade_matches_nested_pairs() {
    let mut ls = vec![
        Learner::new(model(&[32, 32], NormKind::Layernorm, 1), 0.0, 0.9).unwrap(),
        Learner::new(model(&[16], NormKind::Batchnorm, 2), 0.0, 0.9).unwrap(),
        Learner::new(model(&[6], NormKind::Batchnorm, 3), 0.0, 0.9).unwrap(),
    ];
    let x = batch(12);
    let logits: Vec<Tensor> = ls
        .iter()
        .map(|l| l.model.forward_logits(&x).unwrap())
        .collect();
    let mut taus = vec![tau_state(), tau_state()];
    let out = multi_model_coca(&mut ls, &mut taus, &x, &CocaConfig::default()).unwrap();
    assert_eq!(out.taus.len(), 2);

    let low = oracle_ensemble(&logits[1], &logits[2], out.taus[1]);
    let top = oracle_ensemble(&logits[0], &low, out.taus[0]);
    for i in 0..x.rows() {
        for (p, q) in out.ensemble.p_e.row(i).iter().zip(top.row(i)) {
            assert!(close(*p, *q, 1e-12));
        }
    }
    let (m1, c1, s1) = oracle_losses(&logits[1], &logits[2], &low);
    let (m0, c0, s0) = oracle_losses(&logits[0], &low, &top);
    assert!(close(
        out.losses.l_total,
        m1 + c1 + s1 + m0 + c0 + s0,
        1e-12
    ));

    let mut wrong = vec![ls[1].clone(), ls[0].clone(), ls[2].clone()];
    assert!(multi_model_coca(&mut wrong, &mut taus, &x, &CocaConfig::default()).is_err());
    assert!(multi_model_coca(&mut ls, &mut taus[..1], &x, &CocaConfig::default()).is_err());
}

#[test]
fn identical_models_agree_with_their_own_argmax() {
    let m = model(&[10], NormKind::Layernorm, 4);
    let mut a = Learner::new(m.clone(), 0.0, 0.9).unwrap();
    let mut s = Learner::new(m, 0.0, 0.9).unwrap();
    let fixed = TauConfig {
        steps: 0,
        ..TauConfig::default()
    };
    let x = batch(13);
    let out = coca_step(
        &mut a,
        &mut s,
        &mut TauState::new(fixed).unwrap(),
        &x,
        &CocaConfig::default(),
    )
    .unwrap();
    assert_eq!(out.combined(), out.predictions[0].as_slice());
    assert_eq!(out.combined(), out.predictions[1].as_slice());
}

#[test]
fn tent_lowers_entropy_on_a_repeated_batch() {
    let mut l = Learner::new(model(&[12], NormKind::Batchnorm, 5), 1e-3, 0.9).unwrap();
    let x = batch(14);
    let first = tent_step(&mut l, &x).unwrap().entropy;
    let mut last = first;
    for _ in 0..20 {
        last = tent_step(&mut l, &x).unwrap().entropy;
    }
    assert!(last <= first, "{last} > {first}");
}

#[test]
fn tent_is_stationary_at_uniform_predictions() {
    let mut m = Model::build(ModelSpec::mlp(D, &[4], NormKind::Layernorm, 2), 6).unwrap();
    for name in ["head.weight", "head.bias"] {
        let n = m.param(name).unwrap().len();
        m.set_param(name, &vec![0.0; n]).unwrap();
    }
    let mut l = Learner::new(m.clone(), 0.5, 0.9).unwrap();
    tent_step(&mut l, &batch(15)).unwrap();
    for (name, p) in m.params() {
        assert_eq!(p.data(), l.model.param(name).unwrap().data(), "{name}");
    }
}

#[test]
fn a_silent_third_model_leaves_the_top_pair() {
    let mut silent = model(&[6], NormKind::Batchnorm, 3);
    for name in ["head.weight", "head.bias"] {
        let n = silent.param(name).unwrap().len();
        silent.set_param(name, &vec![0.0; n]).unwrap();
    }
    let (a, s) = (
        model(&[32, 32], NormKind::Layernorm, 1),
        model(&[16], NormKind::Batchnorm, 2),
    );
    let x = batch(16);
    let mut three = vec![
        Learner::new(a.clone(), 0.0, 0.9).unwrap(),
        Learner::new(s.clone(), 0.0, 0.9).unwrap(),
        Learner::new(silent, 0.0, 0.9).unwrap(),
    ];
    let mut taus = vec![tau_state(), tau_state()];
    let cascade = multi_model_coca(&mut three, &mut taus, &x, &CocaConfig::default()).unwrap();
    let (mut la, mut ls) = (
        Learner::new(a, 0.0, 0.9).unwrap(),
        Learner::new(s, 0.0, 0.9).unwrap(),
    );
    let pair = coca_step(
        &mut la,
        &mut ls,
        &mut tau_state(),
        &x,
        &CocaConfig::default(),
    )
    .unwrap();
    assert_eq!(cascade.taus[1], 1.0);
    assert_eq!(cascade.taus[0], pair.taus[0]);
    assert_eq!(cascade.combined(), pair.combined());
    for (p, q) in cascade
        .ensemble
        .p_e
        .data()
        .iter()
        .zip(pair.ensemble.p_e.data())
    {
        assert!(close(*p, *q, 1e-12));
    }
}
