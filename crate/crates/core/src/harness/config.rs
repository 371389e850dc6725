use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adaptation::{CocaConfig, TauConfig};
use crate::error::{CocaError, Result};
use crate::models::{ModelSpec, NormKind, TrainConfig};
use crate::shiftgen::{CorruptionKind, CorruptionSpec, SourceTask, StreamOrder, StreamSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SourceOnly,
    Tent,
    Coca,
    /// Co-adaptation with the entropy filter switched on.
    CocaFiltered,
}

impl Strategy {
    pub fn is_coca(self) -> bool {
        matches!(self, Strategy::Coca | Strategy::CocaFiltered)
    }
}

/// One participating model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    /// Names the checkpoint file and the model's report columns.
    pub id: String,
    pub spec: ModelSpec,
    /// Adaptation learning rate.
    #[serde(default = "default_adapt_lr")]
    pub lr: f64,
    /// Initialization seed; derived from the run seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Load this checkpoint instead of pretraining.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the run-wide pretraining settings.
    #[serde(default)]
    pub pretrain: Option<TrainConfig>,
}

fn default_adapt_lr() -> f64 {
    1e-3
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

fn reference_task() -> SourceTask {
    SourceTask::reference(0)
}

fn per_class() -> usize {
    400
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        epochs: 30,
        lr: 0.05,
        momentum: 0.9,
        batch_size: 64,
    }
}

fn default_corruptions() -> Vec<CorruptionSpec> {
    vec![CorruptionSpec {
        kind: CorruptionKind::GaussianNoise,
        severity: 5,
    }]
}

fn default_stream() -> StreamSpec {
    StreamSpec::new(StreamOrder::IidShuffled, 64, None)
}

fn default_strategy() -> Strategy {
    Strategy::Coca
}

fn default_momentum() -> f64 {
    0.9
}

/// Everything that determines one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema")]
    pub schema: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "reference_task")]
    pub task: SourceTask,
    #[serde(default = "per_class")]
    pub train_per_class: usize,
    /// Size of the generated test pool per class.
    #[serde(default = "per_class")]
    pub test_per_class: usize,
    /// Use this COCD file as the clean test pool instead of generating one.
    #[serde(default)]
    pub test_dataset: Option<PathBuf>,
    pub models: Vec<ModelEntry>,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "default_corruptions")]
    pub corruptions: Vec<CorruptionSpec>,
    #[serde(default = "default_stream")]
    pub stream: StreamSpec,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub coca: CocaConfig,
    #[serde(default)]
    pub tau: TauConfig,
    /// Momentum of every adaptation optimizer.
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl RunConfig {
    /// The desk benchmark: 8-class 32-D mixture, a small batchnorm MLP and a
    /// large layernorm MLP, 3200 test samples at gaussian_noise severity 5.
    pub fn reference(seed: u64) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed,
            task: reference_task(),
            train_per_class: per_class(),
            test_per_class: per_class(),
            test_dataset: None,
            models: vec![
                ModelEntry {
                    id: "mlp_s".into(),
                    spec: ModelSpec::mlp(32, &[32], NormKind::Batchnorm, 8),
                    lr: 5e-3,
                    seed: None,
                    checkpoint: None,
                    pretrain: None,
                },
                ModelEntry {
                    id: "mlp_l".into(),
                    spec: ModelSpec::mlp(32, &[128, 128, 128], NormKind::Layernorm, 8),
                    lr: 1e-3,
                    seed: None,
                    checkpoint: None,
                    pretrain: None,
                },
            ],
            pretrain: default_pretrain(),
            corruptions: default_corruptions(),
            stream: default_stream(),
            strategy: Strategy::Coca,
            coca: CocaConfig::default(),
            tau: TauConfig::default(),
            momentum: default_momentum(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CocaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CocaError::Config(m));
        if self.schema != SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema {}, expected {SCHEMA_VERSION}",
                self.schema
            ));
        }
        if self.models.is_empty() {
            return fail("at least one model is required".into());
        }
        if self.strategy.is_coca() && self.models.len() < 2 {
            return fail(format!(
                "strategy {:?} needs at least 2 models",
                self.strategy
            ));
        }
        let mut ids = BTreeSet::new();
        let classes = self.task.num_classes();
        let shape = self.task.sample_shape();
        for m in &self.models {
            let safe = !m.id.is_empty()
                && m.id
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return fail(format!(
                    "model id '{}' must be non-empty [A-Za-z0-9_-]",
                    m.id
                ));
            }
            if !ids.insert(m.id.as_str()) {
                return fail(format!("duplicate model id '{}'", m.id));
            }
            m.spec.validate()?;
            if m.spec.num_classes != classes {
                return fail(format!(
                    "model '{}' predicts {} classes but the task has {classes}",
                    m.id, m.spec.num_classes
                ));
            }
            let flat: usize = shape.iter().product();
            if m.spec.input_shape != shape && m.spec.input_shape != [flat] {
                return fail(format!(
                    "model '{}' expects input {:?} but task samples are {shape:?}",
                    m.id, m.spec.input_shape
                ));
            }
            if !(m.lr >= 0.0 && m.lr.is_finite()) {
                return fail(format!("model '{}' has invalid lr {}", m.id, m.lr));
            }
            if let Some(p) = &m.pretrain {
                check_train(p)?;
            }
        }
        check_train(&self.pretrain)?;
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("train_per_class and test_per_class must be >= 1".into());
        }
        if self.corruptions.is_empty() {
            return fail("at least one corruption is required".into());
        }
        for c in &self.corruptions {
            c.strength()?;
            if c.kind == CorruptionKind::Blur3x3 && shape.len() != 3 {
                return fail("blur3x3 applies to image tasks only".into());
            }
        }
        if self.stream.batch_size < 2 {
            return fail("stream batch_size must be >= 2".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        self.tau.validate()?;
        self.coca.validate()
    }
}

fn check_train(t: &TrainConfig) -> Result<()> {
    if t.epochs == 0
        || t.batch_size < 2
        || !(t.lr.is_finite() && t.lr > 0.0)
        || !(0.0..1.0).contains(&t.momentum)
    {
        return Err(CocaError::Config(format!(
            "pretrain needs epochs >= 1, batch_size >= 2, lr > 0, momentum in [0, 1); got {t:?}"
        )));
    }
    Ok(())
}
