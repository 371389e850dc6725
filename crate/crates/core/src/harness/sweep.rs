use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::Value;

use super::config::RunConfig;
use super::report::RunReport;
use super::run::{prepare_models, run_with_models};
use crate::error::{CocaError, Result};
use crate::seed::hash64;

/// Option lists keyed by config field. Keys are dotted paths into the run
/// config (`tau.steps`, `models.0.lr`) or one of the aliases `K`, `mask`,
/// `lambda_col`, `strategy`, `order`, `severity` (every corruption) and
/// `seed` (replicate index `r`, giving run seed `hash64(base.seed, r)`).
pub type Grid = BTreeMap<String, Vec<Value>>;

/// One cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub index: usize,
    /// `(key, value)` in grid key order.
    pub assignments: Vec<(String, Value)>,
    pub config: RunConfig,
}

impl SweepPoint {
    pub fn dir_name(&self) -> String {
        format!("run_{:03}", self.index)
    }
}

fn resolve(key: &str) -> &str {
    match key {
        "K" | "steps" => "tau.steps",
        "mask" => "coca.mask",
        "lambda_col" => "coca.lambda_col",
        "order" => "stream.order",
        other => other,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    for part in path.split('.') {
        cur = match cur {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| CocaError::Config(format!("sweep key '{path}' is not a config field")))?;
    }
    *cur = value;
    Ok(())
}

fn apply(base: &RunConfig, assignments: &[(String, Value)]) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(base)?;
    let mut seed = None;
    for (key, value) in assignments {
        match key.as_str() {
            "seed" => {
                let r = value.as_u64().ok_or_else(|| {
                    CocaError::Config(format!(
                        "seed replicate must be an unsigned integer, got {value}"
                    ))
                })?;
                seed = Some(hash64(base.seed, r));
            }
            "severity" => {
                for i in 0..base.corruptions.len() {
                    set_path(
                        &mut doc,
                        &format!("corruptions.{i}.severity"),
                        value.clone(),
                    )?;
                }
            }
            k => set_path(&mut doc, resolve(k), value.clone())?,
        }
    }
    let mut cfg: RunConfig = serde_json::from_value(doc)
        .map_err(|e| CocaError::Config(format!("sweep point {assignments:?}: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The Cartesian product of `grid` over `base`, last key varying fastest.
pub fn expand_grid(base: &RunConfig, grid: &Grid) -> Result<Vec<SweepPoint>> {
    if grid.is_empty() {
        return Err(CocaError::Config("sweep grid is empty".into()));
    }
    if let Some((k, _)) = grid.iter().find(|(_, v)| v.is_empty()) {
        return Err(CocaError::Config(format!("sweep key '{k}' has no values")));
    }
    let keys: Vec<&String> = grid.keys().collect();
    let total: usize = grid.values().map(Vec::len).product();
    let mut points = Vec::with_capacity(total);
    for index in 0..total {
        let mut rem = index;
        let mut assignments = vec![(String::new(), Value::Null); keys.len()];
        for (slot, key) in keys.iter().enumerate().rev() {
            let values = &grid[*key];
            assignments[slot] = ((*key).clone(), values[rem % values.len()].clone());
            rem /= values.len();
        }
        let config = apply(base, &assignments)?;
        points.push(SweepPoint {
            index,
            assignments,
            config,
        });
    }
    Ok(points)
}

/// Runs every grid point, up to `parallel` at a time. Results come back in
/// grid order regardless of scheduling.
pub fn ablation_sweep(
    base: &RunConfig,
    grid: &Grid,
    parallel: usize,
) -> Result<Vec<(SweepPoint, RunReport)>> {
    let points = expand_grid(base, grid)?;
    // Source models are prepared serially so shared pretraining happens once.
    let models = points
        .iter()
        .map(|p| prepare_models(&p.config))
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| CocaError::invalid(format!("thread pool: {e}")))?;
    let reports = pool.install(|| {
        points
            .par_iter()
            .zip(models.par_iter())
            .map(|(p, m)| run_with_models(&p.config, m))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(points.into_iter().zip(reports).collect())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

fn value_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per run: `run`, the grid keys, `seed`, `acc_anchor`, `acc_aux`,
/// `acc_combined`, `tau_final`.
pub fn summary_csv(results: &[(SweepPoint, RunReport)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let keys: Vec<String> = results
        .first()
        .map(|(p, _)| p.assignments.iter().map(|(k, _)| k.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["run".to_string()];
    header.extend(keys.iter().cloned());
    header.extend(["seed", "acc_anchor", "acc_aux", "acc_combined", "tau_final"].map(String::from));
    w.write_record(&header)?;
    for (p, r) in results {
        let mut row = vec![p.dir_name()];
        row.extend(p.assignments.iter().map(|(_, v)| value_cell(v)));
        row.push(r.config.seed.to_string());
        row.push(cell(r.overall.models.first().copied()));
        row.push(cell(r.overall.models.get(1).copied()));
        row.push(cell(r.overall.combined));
        row.push(cell(r.overall.tau.as_ref().map(|t| t.last)));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| CocaError::invalid(format!("csv buffer: {e}")))
}
