use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{CocaError, Result};
use crate::io_util::write_atomic;

/// Column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 10] = [
    "batch",
    "acc_anchor",
    "acc_aux",
    "acc_combined",
    "tau",
    "L_mar",
    "L_ckd",
    "L_sa",
    "L_total",
    "kept_frac",
];

/// Per-batch measurements. Fields that do not apply to a strategy are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub batch: usize,
    /// Index into the run's corruption list.
    pub corruption: usize,
    pub samples: usize,
    /// Accuracy of each model's own predictions, anchor order.
    pub acc_models: Vec<f64>,
    pub acc_combined: Option<f64>,
    pub tau: Option<f64>,
    pub l_mar: Option<f64>,
    pub l_ckd: Option<f64>,
    pub l_sa: Option<f64>,
    pub l_total: Option<f64>,
    pub kept_frac: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSummary {
    #[serde(rename = "final")]
    pub last: f64,
    pub min: f64,
    pub max: f64,
}

impl TauSummary {
    pub fn from_trajectory(t: &[f64]) -> Option<Self> {
        let last = *t.last()?;
        Some(Self {
            last,
            min: t.iter().copied().fold(f64::INFINITY, f64::min),
            max: t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

/// Accuracies over a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccuracySummary {
    pub samples: usize,
    /// Anchor order, aligned with [`RunReport::models`].
    pub models: Vec<f64>,
    pub combined: Option<f64>,
    /// Top-level τ over the covered batches.
    pub tau: Option<TauSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionReport {
    pub label: String,
    pub first_batch: usize,
    pub batches: usize,
    pub accuracy: AccuracySummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSummary {
    pub id: String,
    pub param_count: usize,
    pub seed: u64,
}

/// Every seed a run derived from its run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedRecord {
    pub run: u64,
    pub train_data: u64,
    pub test_data: u64,
    pub corruptions: Vec<u64>,
    pub streams: Vec<u64>,
}

/// Outcome of one run. Contains no timing, so identical configs give
/// identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema: u32,
    pub config: RunConfig,
    pub seeds: SeedRecord,
    /// Participating models, anchor first.
    pub models: Vec<ModelSummary>,
    pub corruptions: Vec<CorruptionReport>,
    pub overall: AccuracySummary,
    pub metrics: Vec<MetricsRecord>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(text)?;
        if r.schema != super::config::SCHEMA_VERSION {
            return Err(CocaError::Config(format!(
                "unsupported report schema {}",
                r.schema
            )));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CocaError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CocaError::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Index of a model id in [`RunReport::models`].
    pub fn model_index(&self, id: &str) -> Option<usize> {
        self.models.iter().position(|m| m.id == id)
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Metrics as CSV in [`METRICS_COLUMNS`] order. `acc_aux` is the second
/// model in anchor order; missing values are written as `NA`.
pub fn metrics_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_COLUMNS)?;
    for r in records {
        w.write_record([
            r.batch.to_string(),
            cell(r.acc_models.first().copied()),
            cell(r.acc_models.get(1).copied()),
            cell(r.acc_combined),
            cell(r.tau),
            cell(r.l_mar),
            cell(r.l_ckd),
            cell(r.l_sa),
            cell(r.l_total),
            cell(r.kept_frac),
        ])?;
    }
    w.into_inner()
        .map_err(|e| CocaError::invalid(format!("csv buffer: {e}")))
}

pub fn write_metrics_csv(records: &[MetricsRecord], path: &Path) -> Result<()> {
    write_atomic(path, &metrics_csv(records)?)
}

/// Parses a metrics CSV back, checking the header. Returns one row of
/// optional values per batch, `batch` column excluded.
pub fn read_metrics_csv(path: &Path) -> Result<Vec<(usize, Vec<Option<f64>>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(CocaError::format(
            path,
            format!("unexpected metrics header {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let batch = row[0]
            .parse()
            .map_err(|_| CocaError::format(path, format!("bad batch index '{}'", &row[0])))?;
        let vals = row
            .iter()
            .skip(1)
            .map(|c| match c {
                "NA" => Ok(None),
                v => v
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|_| CocaError::format(path, format!("bad metrics cell '{v}'"))),
            })
            .collect::<Result<_>>()?;
        out.push((batch, vals));
    }
    Ok(out)
}

/// Fraction of positions where `predictions` matches `labels`.
pub fn evaluate_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(CocaError::invalid(format!(
            "accuracy needs equal non-empty lengths, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
