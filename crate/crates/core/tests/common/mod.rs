//! Helpers shared by the integration tests: a finite-difference gradient
//! checker and a catalogue of randomized cases for every tape operation.

#![allow(dead_code)]

use coca::autodiff::{OpKind, Tape, Tensor, Var};
use coca::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Uniform values whose magnitude stays at least `gap` away from zero.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, gap: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, gap, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn eval(build: Build, inputs: &[Tensor], weights: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf_with_grad(t, false))
        .collect();
    let out = build(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, out, weights)?;
    Ok(tape.item(loss))
}

/// Relative error `|a - n| / max(|a| + |n|, 1e-6)` between the analytic and
/// numeric gradients of `sum(W * f(inputs))` for a random weight tensor `W`,
/// maximised over inputs (Euclidean norms over each input's entries).
pub fn grad_rel_error(build: Build, inputs: &[Tensor], weight_seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf_with_grad(t, true))
        .collect();
    let out = build(&mut tape, &vars)?;
    let shape = tape.shape(out).to_vec();
    let weights = uniform(&mut rng(weight_seed), shape, -1.0, 1.0);
    let loss = weighted_sum(&mut tape, out, &weights)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].len()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let mut numeric = Vec::with_capacity(inputs[k].len());
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let d = eval(build, &plus, &weights)? - eval(build, &minus, &weights)?;
            numeric.push(d / (2.0 * FD_STEP));
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / (na + nn).max(1e-6));
    }
    Ok(worst)
}

/// One differentiable operation with a generator of valid random inputs.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: Build,
}

fn dims(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

/// A uniform matrix with a random number of rows and columns.
fn sized(
    r: &mut ChaCha8Rng,
    rows: (usize, usize),
    cols: (usize, usize),
    lo: f64,
    hi: f64,
) -> Tensor {
    let shape = vec![dims(r, rows.0, rows.1), dims(r, cols.0, cols.1)];
    uniform(r, shape, lo, hi)
}

/// Rows whose largest entry beats the runner-up by at least 0.1.
fn distinct_max(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = uniform(r, vec![rows, cols], -2.0, 2.0);
    for row in t.data_mut().chunks_mut(cols) {
        let j = r.random_range(0..cols);
        let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row[j] = top + 0.1 + r.random_range(0.0..1.0);
    }
    t
}

/// The catalogue; every `OpKind` is covered, plus the helpers that bypass
/// [`Tape::apply`].
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            inputs: |r| {
                let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
                vec![
                    uniform(r, vec![m, k], -2.0, 2.0),
                    uniform(r, vec![k, n], -2.0, 2.0),
                ]
            },
            build: |t, v| t.apply(OpKind::MatMul, v),
        },
        OpCase {
            name: "conv2d",
            inputs: |r| {
                let (b, ci, co, h, w) = (
                    dims(r, 1, 2),
                    dims(r, 1, 2),
                    dims(r, 1, 3),
                    dims(r, 1, 4),
                    dims(r, 1, 4),
                );
                vec![
                    uniform(r, vec![b, ci, h, w], -1.0, 1.0),
                    uniform(r, vec![co, ci, 3, 3], -1.0, 1.0),
                    uniform(r, vec![co], -1.0, 1.0),
                ]
            },
            build: |t, v| t.apply(OpKind::Conv2d, v),
        },
        OpCase {
            name: "add",
            inputs: |r| {
                let s = vec![dims(r, 1, 4), dims(r, 1, 5)];
                vec![uniform(r, s.clone(), -2.0, 2.0), uniform(r, s, -2.0, 2.0)]
            },
            build: |t, v| t.apply(OpKind::Add, v),
        },
        OpCase {
            name: "add_broadcast",
            inputs: |r| {
                let (b, f) = (dims(r, 1, 4), dims(r, 1, 5));
                vec![
                    uniform(r, vec![b, f], -2.0, 2.0),
                    uniform(r, vec![f], -2.0, 2.0),
                ]
            },
            build: |t, v| t.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            inputs: |r| {
                let (b, f) = (dims(r, 1, 4), dims(r, 1, 5));
                let rhs = if r.random_bool(0.5) {
                    vec![b, f]
                } else {
                    vec![f]
                };
                vec![
                    uniform(r, vec![b, f], -2.0, 2.0),
                    uniform(r, rhs, -2.0, 2.0),
                ]
            },
            build: |t, v| t.apply(OpKind::Sub, v),
        },
        OpCase {
            name: "mul",
            inputs: |r| {
                let (b, f) = (dims(r, 1, 4), dims(r, 1, 5));
                let rhs = if r.random_bool(0.5) {
                    vec![b, f]
                } else {
                    vec![f]
                };
                vec![
                    uniform(r, vec![b, f], -2.0, 2.0),
                    uniform(r, rhs, -2.0, 2.0),
                ]
            },
            build: |t, v| t.apply(OpKind::Mul, v),
        },
        OpCase {
            name: "div",
            inputs: |r| {
                let s = vec![dims(r, 1, 4), dims(r, 1, 5)];
                vec![
                    uniform(r, s.clone(), -2.0, 2.0),
                    away_from_zero(r, s, 0.5, 2.0),
                ]
            },
            build: |t, v| t.apply(OpKind::Div, v),
        },
        OpCase {
            name: "mul_rows",
            inputs: |r| {
                let (b, f) = (dims(r, 1, 4), dims(r, 1, 5));
                vec![
                    uniform(r, vec![b, f], -2.0, 2.0),
                    uniform(r, vec![b], -2.0, 2.0),
                ]
            },
            build: |t, v| t.mul_rows(v[0], v[1]),
        },
        OpCase {
            name: "scalar_div",
            inputs: |r| vec![sized(r, (1, 4), (1, 5), -2.0, 2.0)],
            build: |t, v| t.apply(OpKind::ScalarDiv(1.7), v),
        },
        OpCase {
            name: "relu",
            inputs: |r| {
                vec![{
                    let s = vec![dims(r, 1, 4), dims(r, 1, 5)];
                    away_from_zero(r, s, 1e-2, 2.0)
                }]
            },
            build: |t, v| t.apply(OpKind::Relu, v),
        },
        OpCase {
            name: "exp",
            inputs: |r| vec![sized(r, (1, 4), (1, 5), -2.0, 2.0)],
            build: |t, v| t.apply(OpKind::Exp, v),
        },
        OpCase {
            name: "log",
            inputs: |r| vec![sized(r, (1, 4), (1, 5), 0.2, 3.0)],
            build: |t, v| t.apply(OpKind::Log, v),
        },
        OpCase {
            name: "sum",
            inputs: |r| vec![sized(r, (1, 4), (1, 5), -2.0, 2.0)],
            build: |t, v| t.apply(OpKind::Sum, v),
        },
        OpCase {
            name: "mean",
            inputs: |r| vec![sized(r, (1, 4), (1, 5), -2.0, 2.0)],
            build: |t, v| t.apply(OpKind::Mean, v),
        },
        OpCase {
            name: "sum_last",
            inputs: |r| vec![sized(r, (1, 4), (1, 5), -2.0, 2.0)],
            build: |t, v| t.sum_last(v[0]),
        },
        OpCase {
            name: "max_last",
            inputs: |r| {
                vec![{
                    let (b, c) = (dims(r, 1, 4), dims(r, 1, 6));
                    distinct_max(r, b, c)
                }]
            },
            build: |t, v| t.apply(OpKind::MaxLast, v),
        },
        OpCase {
            name: "softmax_last",
            inputs: |r| vec![sized(r, (1, 4), (1, 6), -3.0, 3.0)],
            build: |t, v| t.apply(OpKind::SoftmaxLast, v),
        },
        OpCase {
            name: "logsumexp_last",
            inputs: |r| vec![sized(r, (1, 4), (1, 6), -3.0, 3.0)],
            build: |t, v| t.apply(OpKind::LogSumExpLast, v),
        },
        OpCase {
            name: "batch_norm",
            inputs: |r| {
                let (b, f) = (dims(r, 2, 6), dims(r, 1, 4));
                vec![
                    uniform(r, vec![b, f], -2.0, 2.0),
                    uniform(r, vec![f], 0.5, 1.5),
                    uniform(r, vec![f], -0.5, 0.5),
                ]
            },
            build: |t, v| t.apply(OpKind::BatchNorm, v),
        },
        OpCase {
            name: "batch_norm_spatial",
            inputs: |r| {
                let (b, c, h, w) = (dims(r, 2, 3), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
                vec![
                    uniform(r, vec![b, c, h, w], -2.0, 2.0),
                    uniform(r, vec![c], 0.5, 1.5),
                    uniform(r, vec![c], -0.5, 0.5),
                ]
            },
            build: |t, v| t.batch_norm(v[0], v[1], v[2]),
        },
        OpCase {
            name: "layer_norm",
            inputs: |r| {
                let (b, f) = (dims(r, 1, 4), dims(r, 2, 6));
                vec![
                    uniform(r, vec![b, f], -2.0, 2.0),
                    uniform(r, vec![f], 0.5, 1.5),
                    uniform(r, vec![f], -0.5, 0.5),
                ]
            },
            build: |t, v| t.apply(OpKind::LayerNorm, v),
        },
        OpCase {
            name: "reshape",
            inputs: |r| {
                vec![{
                    let b = dims(r, 1, 4);
                    uniform(r, vec![b, 6], -2.0, 2.0)
                }]
            },
            build: |t, v| {
                let b = t.shape(v[0])[0];
                let x = t.reshape(v[0], vec![b, 2, 3])?;
                let w = t.constant(Tensor::new(vec![2, 3], (1..=6).map(f64::from).collect())?);
                t.mul(x, w)
            },
        },
        OpCase {
            name: "select_rows",
            inputs: |r| vec![sized(r, (2, 5), (1, 4), -2.0, 2.0)],
            build: |t, v| {
                let b = t.shape(v[0])[0];
                let idx: Vec<usize> = (0..b + 2).map(|i| (i * 7 + 1) % b).collect();
                t.select_rows(v[0], &idx)
            },
        },
    ]
}
