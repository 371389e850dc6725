use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Value};

use coca::autodiff::Tensor;
use coca::error::{CocaError, Result};
use coca::harness::{
    ablation_sweep, metrics_csv, pretrain_entry, read_metrics_csv, run, source_data, summary_csv,
    test_pool, Grid, RunConfig, RunReport,
};
use coca::io_util::write_atomic;
use coca::models::{encode_checkpoint, load_checkpoint};
use coca::seed::{hash64, slot};
use coca::shiftgen::{apply_corruption, load_dataset, save_dataset, Dataset};

use super::{read_text, Split};

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = read_text(path)?;
    let mut cfg = RunConfig::from_json(&text).map_err(|e| match e {
        CocaError::Config(m) => CocaError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn point_to_checkpoints(cfg: &mut RunConfig, dir: &Path) -> Result<()> {
    for m in cfg.models.iter_mut().filter(|m| m.checkpoint.is_none()) {
        let p = dir.join(format!("{}.cock", m.id));
        if !p.is_file() {
            return Err(CocaError::Config(format!(
                "missing checkpoint {} for model '{}'",
                p.display(),
                m.id
            )));
        }
        m.checkpoint = Some(p);
    }
    Ok(())
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Writes `report.json` and `metrics.csv` into `dir` and reads both back.
fn write_run(dir: &Path, report: &RunReport) -> Result<()> {
    let report_path = dir.join("report.json");
    let metrics_path = dir.join("metrics.csv");
    report.save(&report_path)?;
    write_atomic(&metrics_path, &metrics_csv(&report.metrics)?)?;
    if RunReport::load(&report_path)? != *report {
        return Err(CocaError::format(
            &report_path,
            "report did not read back identically",
        ));
    }
    if read_metrics_csv(&metrics_path)?.len() != report.metrics.len() {
        return Err(CocaError::format(
            &metrics_path,
            "metrics row count mismatch",
        ));
    }
    Ok(())
}

pub fn pretrain(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let task = serde_json::to_value(&cfg.task)?;
    let mut staged = Vec::new();
    let mut logs = Vec::new();
    for (i, entry) in cfg.models.iter().enumerate() {
        let (model, log) = pretrain_entry(&cfg, i)?;
        let extra = BTreeMap::from([
            ("id".to_string(), json!(entry.id)),
            ("task".to_string(), task.clone()),
        ]);
        staged.push((
            out.join(format!("{}.cock", entry.id)),
            encode_checkpoint(&model, &extra)?,
        ));
        logs.push(json!({
            "id": entry.id,
            "seed": model.seed(),
            "param_count": model.param_count(),
            "epochs": log,
        }));
    }
    for (path, bytes) in &staged {
        write_atomic(path, bytes)?;
        load_checkpoint(path)?;
        println!("{}", path.display());
    }
    write_json(
        &out.join("pretrain_log.json"),
        &json!({"schema": 1, "seed": cfg.seed, "models": logs}),
    )
}

pub fn adapt(
    config: &Path,
    checkpoints: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(dir) = checkpoints {
        point_to_checkpoints(&mut cfg, dir)?;
    }
    let start = Instant::now();
    let report = run(&cfg)?;
    let seconds = start.elapsed().as_secs_f64();
    write_run(out, &report)?;
    write_json(&out.join("timing.json"), &json!({ "seconds": seconds }))?;
    let o = &report.overall;
    let accs: Vec<String> = report
        .models
        .iter()
        .zip(&o.models)
        .map(|(m, a)| format!("{}={a:.4}", m.id))
        .collect();
    match o.combined {
        Some(c) => println!("{} combined={c:.4}", accs.join(" ")),
        None => println!("{}", accs.join(" ")),
    }
    Ok(())
}

fn load_grid(path: &Path) -> Result<Grid> {
    let value: Value = serde_json::from_str(&read_text(path)?)
        .map_err(|e| CocaError::Config(format!("{}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(CocaError::Config(
            "grid must be a JSON object of lists".into(),
        ));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::Array(items) => Ok((k, items)),
            _ => Err(CocaError::Config(format!(
                "grid key '{k}' must map to a list"
            ))),
        })
        .collect()
}

pub fn sweep(
    config: &Path,
    grid: &Path,
    checkpoints: Option<&Path>,
    out: &Path,
    parallel: usize,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(config, seed)?;
    if let Some(dir) = checkpoints {
        point_to_checkpoints(&mut cfg, dir)?;
    }
    let grid = load_grid(grid)?;
    let start = Instant::now();
    let results = ablation_sweep(&cfg, &grid, parallel)?;
    let seconds = start.elapsed().as_secs_f64();
    for (point, report) in &results {
        write_run(&out.join(point.dir_name()), report)?;
    }
    let summary_path = out.join("summary.csv");
    write_atomic(&summary_path, &summary_csv(&results)?)?;
    let rows = csv::Reader::from_path(&summary_path)?.records().count();
    if rows != results.len() {
        return Err(CocaError::format(
            &summary_path,
            "summary row count mismatch",
        ));
    }
    write_json(
        &out.join("timing.json"),
        &json!({ "seconds": seconds, "parallel": parallel }),
    )?;
    println!("{} runs -> {}", results.len(), summary_path.display());
    Ok(())
}

fn export_data(cfg: &RunConfig, split: Split, corruption: Option<usize>) -> Result<Dataset> {
    match (split, corruption) {
        (Split::Train, None) => source_data(cfg),
        (Split::Train, Some(_)) => Err(CocaError::Config(
            "--corruption applies to the test split only".into(),
        )),
        (Split::Test, None) => test_pool(cfg),
        (Split::Test, Some(j)) => {
            let spec = cfg.corruptions.get(j).ok_or_else(|| {
                CocaError::Config(format!(
                    "corruption index {j} out of range ({} configured)",
                    cfg.corruptions.len()
                ))
            })?;
            let pool = test_pool(cfg)?;
            let seed = hash64(hash64(cfg.seed, slot::CORRUPTION), j as u64);
            let features = apply_corruption(&pool.features, spec, seed)?;
            Dataset::new(features, pool.labels, pool.num_classes)
        }
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn dataset_export(
    config: &Path,
    split: Split,
    corruption: Option<usize>,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = load_config(config, seed)?;
    let data = export_data(&cfg, split, corruption)?;
    if is_csv(out) {
        let width = data.features.row_width();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..data.len() {
            let mut row: Vec<String> = data.features.row(i).iter().map(f64::to_string).collect();
            row.push(data.labels[i].to_string());
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| CocaError::invalid(format!("csv buffer: {e}")))?;
        write_atomic(out, &bytes)?;
    } else {
        save_dataset(&data, out)?;
        if load_dataset(out, Some(data.num_classes))? != data {
            return Err(CocaError::format(
                out,
                "dataset did not read back identically",
            ));
        }
    }
    println!("{} samples -> {}", data.len(), out.display());
    Ok(())
}

pub fn dataset_import(
    input: &Path,
    out: &Path,
    shape: Option<Vec<usize>>,
    num_classes: Option<usize>,
) -> Result<()> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(input)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: Option<Vec<f64>> = rec.iter().map(|c| c.trim().parse::<f64>().ok()).collect();
        let Some(values) = parsed else {
            if line == 0 {
                continue;
            }
            return Err(CocaError::format(
                input,
                format!("row {} has a non-numeric cell", line + 1),
            ));
        };
        let (label, row) = values
            .split_last()
            .ok_or_else(|| CocaError::format(input, format!("row {} is empty", line + 1)))?;
        if row.is_empty() || *width.get_or_insert(row.len()) != row.len() {
            return Err(CocaError::format(
                input,
                format!("row {} has {} features", line + 1, row.len()),
            ));
        }
        if label.fract() != 0.0 || *label < 0.0 {
            return Err(CocaError::format(
                input,
                format!("row {} has label {label}", line + 1),
            ));
        }
        features.extend_from_slice(row);
        labels.push(*label as usize);
    }
    let width = width.ok_or_else(|| CocaError::format(input, "no data rows"))?;
    let sample: Vec<usize> = shape.unwrap_or_else(|| vec![width]);
    if sample.iter().product::<usize>() != width {
        return Err(CocaError::Config(format!(
            "shape {sample:?} does not hold {width} features"
        )));
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(2, |m| (m + 1).max(2)));
    let mut full = vec![labels.len()];
    full.extend(sample);
    let data = Dataset::new(Tensor::new(full, features)?, labels, classes)?;
    save_dataset(&data, out)?;
    load_dataset(out, Some(classes))?;
    println!(
        "{} samples, {} classes -> {}",
        data.len(),
        classes,
        out.display()
    );
    Ok(())
}
