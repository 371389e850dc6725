mod common;

use coca::autodiff::{Tape, Tensor};
use coca::models::{cross_entropy, Model, ModelSpec, NormKind, Trainable};
use common::{grad_rel_error, op_cases, rng, uniform, FD_STEP};

const TOL: f64 = 1e-4;

#[test]
fn catalogue_ops_match_finite_differences() {
    for (k, case) in op_cases().iter().enumerate() {
        let mut r = rng(1000 + k as u64);
        for trial in 0..10 {
            let inputs = (case.inputs)(&mut r);
            let err = grad_rel_error(case.build, &inputs, trial).unwrap();
            assert!(err < TOL, "{} trial {trial}: rel err {err:e}", case.name);
        }
    }
}

#[test]
fn checker_detects_a_wrong_gradient() {
    // relu evaluated exactly at its kink: the one-sided analytic gradient
    // disagrees with the symmetric difference.
    let x = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
    let err = grad_rel_error(|t, v| Ok(t.relu(v[0])), &[x], 0).unwrap();
    assert!(err > 0.1, "{err}");
}

fn loss_of(model: &Model, x: &Tensor, y: &[usize]) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, Trainable::Nothing).unwrap();
    let loss = cross_entropy(&mut tape, fwd.logits, y).unwrap();
    tape.item(loss)
}

fn check_model(spec: ModelSpec, x: Tensor, y: Vec<usize>) {
    let mut model = Model::build(spec, 17).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let fwd = model.forward(&mut tape, xv, Trainable::All).unwrap();
    let loss = cross_entropy(&mut tape, fwd.logits, &y).unwrap();
    let grads = tape.backward(loss).unwrap();
    model.zero_grads();
    model.accumulate_grads(&grads, &fwd).unwrap();

    let names: Vec<String> = model.param_names().to_vec();
    for name in names {
        let p = model.param(&name).unwrap().clone();
        let analytic = p.grad().expect("every parameter gets a gradient").to_vec();
        let mut numeric = Vec::new();
        for i in 0..p.len() {
            let mut probe = model.clone();
            let mut v = p.data().to_vec();
            v[i] += FD_STEP;
            probe.set_param(&name, &v).unwrap();
            let up = loss_of(&probe, &x, &y);
            v[i] -= 2.0 * FD_STEP;
            probe.set_param(&name, &v).unwrap();
            let down = loss_of(&probe, &x, &y);
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = analytic
            .iter()
            .chain(&numeric)
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt();
        assert!(
            diff / scale.max(1e-6) < TOL,
            "{name}: {diff:e} vs {scale:e}"
        );
    }
}

#[test]
fn mlp_batchnorm_parameters() {
    let x = uniform(&mut rng(1), vec![6, 5], -2.0, 2.0);
    check_model(
        ModelSpec::mlp(5, &[7, 4], NormKind::Batchnorm, 3),
        x,
        vec![0, 1, 2, 0, 1, 2],
    );
}

#[test]
fn mlp_layernorm_parameters() {
    let x = uniform(&mut rng(2), vec![4, 5], -2.0, 2.0);
    check_model(
        ModelSpec::mlp(5, &[6], NormKind::Layernorm, 3),
        x,
        vec![2, 1, 0, 0],
    );
}

#[test]
fn convnet_parameters() {
    let x = uniform(&mut rng(3), vec![3, 2, 4, 4], -1.0, 1.0);
    check_model(ModelSpec::convnet([2, 4, 4], [3, 2], 4), x, vec![3, 0, 1]);
}
