use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use super::config::{RunConfig, Strategy, SCHEMA_VERSION};
use super::report::{
    AccuracySummary, CorruptionReport, MetricsRecord, ModelSummary, RunReport, SeedRecord,
    TauSummary,
};
use crate::adaptation::{coca_step, multi_model_coca, tent_step, CocaConfig, Learner, TauState};
use crate::error::{CocaError, Result};
use crate::models::{anchor_order, load_checkpoint, pretrain, EpochStats, Model};
use crate::seed::{hash64, slot};
use crate::shiftgen::{apply_corruption, gen_source, load_dataset, make_stream, Dataset};

/// Initialization seed of model `i`.
pub fn model_seed(cfg: &RunConfig, i: usize) -> u64 {
    cfg.models[i]
        .seed
        .unwrap_or_else(|| hash64(cfg.seed, slot::MODEL_BASE + i as u64))
}

/// The labeled source training set of a config.
pub fn source_data(cfg: &RunConfig) -> Result<Dataset> {
    gen_source(
        &cfg.task,
        cfg.train_per_class,
        hash64(cfg.seed, slot::TRAIN_DATA),
    )
}

/// The clean test pool: the imported dataset if configured, otherwise a fresh
/// draw from the task.
pub fn test_pool(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.test_dataset {
        Some(path) => {
            let d = load_dataset(path, Some(cfg.task.num_classes()))?;
            let want = cfg.task.sample_shape();
            if d.sample_shape() != want.as_slice() {
                return Err(CocaError::Config(format!(
                    "test dataset samples are {:?}, task samples are {want:?}",
                    d.sample_shape()
                )));
            }
            Ok(d)
        }
        None => gen_source(
            &cfg.task,
            cfg.test_per_class,
            hash64(cfg.seed, slot::TEST_DATA),
        ),
    }
}

type Trained = (Model, Vec<EpochStats>);

fn cache() -> &'static Mutex<HashMap<String, Trained>> {
    static CACHE: OnceLock<Mutex<HashMap<String, Trained>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// Pretrains model `i` on the config's source data. Results are memoized
/// per process on everything that determines them.
pub fn pretrain_entry(cfg: &RunConfig, i: usize) -> Result<Trained> {
    let entry = &cfg.models[i];
    let train = entry.pretrain.as_ref().unwrap_or(&cfg.pretrain);
    let seed = model_seed(cfg, i);
    let key = serde_json::to_string(&(
        &cfg.task,
        cfg.train_per_class,
        cfg.seed,
        &entry.spec,
        seed,
        train,
    ))?;
    if let Some(hit) = cache().lock().expect("cache lock").get(&key) {
        return Ok(hit.clone());
    }
    let data = source_data(cfg)?;
    let mut model = Model::build(entry.spec.clone(), seed)?;
    let log = pretrain(&mut model, &data, train, hash64(seed, slot::PRETRAIN))?;
    let out = (model, log);
    cache().lock().expect("cache lock").insert(key, out.clone());
    Ok(out)
}

/// Source models in config order, loaded from checkpoints where given and
/// pretrained otherwise.
pub fn prepare_models(cfg: &RunConfig) -> Result<Vec<Model>> {
    cfg.validate()?;
    (0..cfg.models.len())
        .map(|i| match &cfg.models[i].checkpoint {
            Some(path) => {
                let (model, meta) = load_checkpoint(path)?;
                if meta.spec != cfg.models[i].spec {
                    return Err(CocaError::Config(format!(
                        "checkpoint {} holds a different model than '{}'",
                        path.display(),
                        cfg.models[i].id
                    )));
                }
                if let Some(task) = meta.extra.get("task") {
                    if *task != serde_json::to_value(&cfg.task)? {
                        return Err(CocaError::Config(format!(
                            "checkpoint {} was trained on a different task",
                            path.display()
                        )));
                    }
                }
                Ok(model)
            }
            None => pretrain_entry(cfg, i).map(|(m, _)| m),
        })
        .collect()
}

/// Runs a config end to end, pretraining or loading its models first.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let models = prepare_models(cfg)?;
    run_with_models(cfg, &models)
}

#[derive(Default)]
struct Tally {
    samples: usize,
    models: Vec<usize>,
    combined: usize,
    taus: Vec<f64>,
}

impl Tally {
    fn new(n: usize) -> Self {
        Self {
            models: vec![0; n],
            ..Self::default()
        }
    }

    fn summary(&self, has_combined: bool) -> AccuracySummary {
        let n = self.samples as f64;
        AccuracySummary {
            samples: self.samples,
            models: self.models.iter().map(|&c| c as f64 / n).collect(),
            combined: has_combined.then(|| self.combined as f64 / n),
            tau: TauSummary::from_trajectory(&self.taus),
        }
    }
}

fn hits(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Runs a config with already prepared source models (config order). Models
/// are copied; every corruption starts from the source weights and a fresh τ.
pub fn run_with_models(cfg: &RunConfig, models: &[Model]) -> Result<RunReport> {
    cfg.validate()?;
    if models.len() != cfg.models.len() {
        return Err(CocaError::invalid(format!(
            "config lists {} models, {} given",
            cfg.models.len(),
            models.len()
        )));
    }
    for (m, e) in models.iter().zip(&cfg.models) {
        if *m.spec() != e.spec {
            return Err(CocaError::invalid(format!(
                "model for '{}' does not match its spec",
                e.id
            )));
        }
    }
    let order = if models.len() >= 2 {
        anchor_order(&models.iter().map(Model::param_count).collect::<Vec<_>>())?
    } else {
        vec![0]
    };
    let n = order.len();
    let pool = test_pool(cfg)?;
    let corruption_base = hash64(cfg.seed, slot::CORRUPTION);
    let stream_base = hash64(cfg.seed, slot::STREAM);
    let seeds = SeedRecord {
        run: cfg.seed,
        train_data: hash64(cfg.seed, slot::TRAIN_DATA),
        test_data: hash64(cfg.seed, slot::TEST_DATA),
        corruptions: (0..cfg.corruptions.len() as u64)
            .map(|j| hash64(corruption_base, j))
            .collect(),
        streams: (0..cfg.corruptions.len() as u64)
            .map(|j| hash64(stream_base, j))
            .collect(),
    };
    let mut coca = cfg.coca.clone();
    if cfg.strategy == Strategy::CocaFiltered {
        coca.filter.enabled = true;
    }
    let has_combined = cfg.strategy.is_coca();

    let mut metrics = Vec::new();
    let mut overall = Tally::new(n);
    let mut per_corruption = Vec::with_capacity(cfg.corruptions.len());
    for (j, spec) in cfg.corruptions.iter().enumerate() {
        let features = apply_corruption(&pool.features, spec, seeds.corruptions[j])?;
        let data = Dataset::new(features, pool.labels.clone(), pool.num_classes)?;
        let stream = make_stream(&data, &cfg.stream, seeds.streams[j])?;
        let mut learners = order
            .iter()
            .map(|&i| Learner::new(models[i].clone(), cfg.models[i].lr, cfg.momentum))
            .collect::<Result<Vec<_>>>()?;
        let mut taus = (1..n)
            .map(|_| TauState::new(cfg.tau.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut tally = Tally::new(n);
        let first_batch = metrics.len();
        for batch in stream {
            let rec = step(
                cfg.strategy,
                &mut learners,
                &mut taus,
                &batch.features,
                &coca,
            )?;
            let b = batch.labels.len();
            let model_hits: Vec<usize> = rec
                .predictions
                .iter()
                .map(|p| hits(p, &batch.labels))
                .collect();
            let comb_hits = rec.combined.as_ref().map(|c| hits(c, &batch.labels));
            for t in [&mut tally, &mut overall] {
                t.samples += b;
                t.models
                    .iter_mut()
                    .zip(&model_hits)
                    .for_each(|(a, h)| *a += h);
                t.combined += comb_hits.unwrap_or(0);
                t.taus.extend(rec.tau);
            }
            metrics.push(MetricsRecord {
                batch: metrics.len(),
                corruption: j,
                samples: b,
                acc_models: model_hits.iter().map(|&h| h as f64 / b as f64).collect(),
                acc_combined: comb_hits.map(|h| h as f64 / b as f64),
                tau: rec.tau,
                l_mar: rec.l_mar,
                l_ckd: rec.l_ckd,
                l_sa: rec.l_sa,
                l_total: rec.l_total,
                kept_frac: rec.kept.map(|k| k as f64 / b as f64),
            });
        }
        per_corruption.push(CorruptionReport {
            label: spec.label(),
            first_batch,
            batches: metrics.len() - first_batch,
            accuracy: tally.summary(has_combined),
        });
    }
    Ok(RunReport {
        schema: SCHEMA_VERSION,
        config: cfg.clone(),
        seeds,
        models: order
            .iter()
            .map(|&i| ModelSummary {
                id: cfg.models[i].id.clone(),
                param_count: models[i].param_count(),
                seed: models[i].seed(),
            })
            .collect(),
        corruptions: per_corruption,
        overall: overall.summary(has_combined),
        metrics,
    })
}

#[derive(Default)]
struct StepRecord {
    predictions: Vec<Vec<usize>>,
    combined: Option<Vec<usize>>,
    tau: Option<f64>,
    l_mar: Option<f64>,
    l_ckd: Option<f64>,
    l_sa: Option<f64>,
    l_total: Option<f64>,
    kept: Option<usize>,
}

fn step(
    strategy: Strategy,
    learners: &mut [Learner],
    taus: &mut [TauState],
    x: &crate::autodiff::Tensor,
    coca: &CocaConfig,
) -> Result<StepRecord> {
    match strategy {
        Strategy::SourceOnly => Ok(StepRecord {
            predictions: learners
                .iter()
                .map(|l| l.model.forward_logits(x).map(|z| z.argmax_rows()))
                .collect::<Result<_>>()?,
            ..StepRecord::default()
        }),
        Strategy::Tent => {
            let mut rec = StepRecord::default();
            let mut total = 0.0;
            for l in learners.iter_mut() {
                let out = tent_step(l, x)?;
                total += out.entropy;
                rec.predictions.push(out.predictions);
            }
            rec.l_sa = Some(total);
            rec.l_total = Some(total);
            Ok(rec)
        }
        Strategy::Coca | Strategy::CocaFiltered => {
            let out = match learners {
                [a, s] => coca_step(a, s, &mut taus[0], x, coca)?,
                _ => multi_model_coca(learners, taus, x, coca)?,
            };
            Ok(StepRecord {
                combined: Some(out.ensemble.y_hat.clone()),
                tau: out.taus.first().copied(),
                l_mar: Some(out.losses.l_mar),
                l_ckd: Some(out.losses.l_ckd),
                l_sa: Some(out.losses.l_sa),
                l_total: Some(out.losses.l_total),
                kept: Some(out.kept),
                predictions: out.predictions,
            })
        }
    }
}
