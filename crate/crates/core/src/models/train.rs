use serde::{Deserialize, Serialize};

use super::zoo::{Model, Trainable};
use crate::autodiff::{Sgd, Tape, Tensor, Var};
use crate::error::{CocaError, Result};
use crate::shiftgen::{Dataset, StreamOrder, StreamSpec};

/// Supervised source training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch() -> usize {
    64
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: default_momentum(),
            batch_size: default_batch(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy of `(B, C)` logits against integer targets.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(CocaError::shape(
            "cross_entropy",
            format!("logits {shape:?} with {} targets", targets.len()),
        ));
    }
    let c = shape[1];
    let mut onehot = vec![0.0; shape[0] * c];
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(CocaError::invalid(format!(
                "target {t} out of range for {c} classes"
            )));
        }
        onehot[i * c + t] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(shape, onehot)?);
    let lse = tape.logsumexp_last(logits)?;
    let picked = tape.mul(logits, onehot)?;
    let picked = tape.sum_last(picked)?;
    let per = tape.sub(lse, picked)?;
    Ok(tape.mean(per))
}

/// Trains every parameter with cross-entropy and momentum SGD on shuffled
/// batches. Returns per-epoch mean loss and training accuracy.
pub fn pretrain(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    if cfg.epochs == 0 {
        return Err(CocaError::invalid("epochs must be >= 1"));
    }
    if data.num_classes != model.num_classes() {
        return Err(CocaError::invalid(format!(
            "dataset has {} classes, model has {}",
            data.num_classes,
            model.num_classes()
        )));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let names = model.param_names().to_vec();
    let spec = StreamSpec::new(StreamOrder::IidShuffled, cfg.batch_size, None);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stream =
            crate::shiftgen::make_stream(data, &spec, crate::seed::hash64(seed, epoch as u64))?;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in stream {
            let mut tape = Tape::new();
            let x = tape.leaf(&batch.features);
            let fwd = model.forward(&mut tape, x, Trainable::All)?;
            let logits = tape.tensor(fwd.logits);
            let loss = cross_entropy(&mut tape, fwd.logits, &batch.labels)?;
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(CocaError::invalid(format!(
                    "training loss diverged in epoch {epoch}"
                )));
            }
            let grads = tape.backward(loss)?;
            model.accumulate_grads(&grads, &fwd)?;
            opt.step(model.params_for_update(&names))?;
            let n = batch.labels.len();
            loss_sum += value * n as f64;
            seen += n;
            correct += count_correct(&logits, &batch.labels);
        }
        log.push(EpochStats {
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
        });
    }
    Ok(log)
}

pub(crate) fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count()
}

/// Accuracy over `data` in batches of `batch_size`, in dataset order, with no
/// parameter updates.
pub fn evaluate(model: &Model, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(CocaError::invalid("cannot evaluate on an empty dataset"));
    }
    if batch_size < 2 {
        return Err(CocaError::invalid("evaluation batch_size must be >= 2"));
    }
    let n = data.len();
    let (mut correct, mut seen) = (0usize, 0usize);
    let mut start = 0;
    while start < n {
        let mut end = (start + batch_size).min(n);
        if n - end < 2 {
            end = n;
        }
        let idx: Vec<usize> = (start..end).collect();
        let logits = model.forward_logits(&data.features.select_rows(&idx))?;
        correct += count_correct(&logits, &data.labels[start..end]);
        seen += end - start;
        start = end;
    }
    Ok(correct as f64 / seen as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelSpec, NormKind};
    use crate::shiftgen::{gen_source, SourceTask};

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros(vec![3, 4]));
        let l = cross_entropy(&mut tape, z, &[0, 1, 3]).unwrap();
        assert!((tape.item(l) - 4f64.ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        let z = tape.leaf(&Tensor::zeros(vec![3, 4]));
        assert!(cross_entropy(&mut tape, z, &[0, 1]).is_err());
        assert!(cross_entropy(&mut tape, z, &[0, 1, 4]).is_err());
    }

    #[test]
    fn pretraining_learns_the_mixture() {
        let task = SourceTask::reference(0);
        let train = gen_source(&task, 60, 1).unwrap();
        let test = gen_source(&task, 20, 2).unwrap();
        let mut m = Model::build(ModelSpec::mlp(32, &[16], NormKind::Batchnorm, 8), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            lr: 0.05,
            ..TrainConfig::default()
        };
        let log = pretrain(&mut m, &train, &cfg, 4).unwrap();
        assert_eq!(log.len(), 4);
        assert!(log[3].loss < log[0].loss);
        assert!(evaluate(&m, &test, 64).unwrap() > 0.9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let task = SourceTask::reference(0);
        let d = gen_source(&task, 2, 1).unwrap();
        let mut m = Model::build(ModelSpec::mlp(32, &[4], NormKind::Batchnorm, 8), 0).unwrap();
        let zero = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(pretrain(&mut m, &d, &zero, 0).is_err());
        let mut other = Model::build(ModelSpec::mlp(32, &[4], NormKind::Batchnorm, 3), 0).unwrap();
        assert!(pretrain(&mut other, &d, &TrainConfig::default(), 0).is_err());
    }
}
