use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use coca::error::{CocaError, Result};
use coca::harness::{MetricsRecord, RunReport};
use coca::io_util::write_atomic;

/// Every `report.json` below `root` (or `root` itself), sorted by path.
fn find_reports(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut found = Vec::new();
    for entry in WalkDir::new(root) {
        let entry =
            entry.map_err(|e| CocaError::Config(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() && entry.file_name() == "report.json" {
            found.push(entry.into_path());
        }
    }
    found.sort();
    if found.is_empty() {
        return Err(CocaError::Config(format!(
            "no report.json under {}",
            root.display()
        )));
    }
    Ok(found)
}

/// Short name for a report: its directory relative to the input root.
fn run_name(root: &Path, path: &Path) -> String {
    let dir = path.parent().unwrap_or(path);
    match dir.strip_prefix(root) {
        Ok(rel) if !rel.as_os_str().is_empty() => rel.display().to_string(),
        _ => ".".into(),
    }
}

type Getter = fn(&MetricsRecord) -> Option<f64>;

const SCALARS: [(&str, Getter); 7] = [
    ("acc_combined", |m| m.acc_combined),
    ("tau", |m| m.tau),
    ("L_mar", |m| m.l_mar),
    ("L_ckd", |m| m.l_ckd),
    ("L_sa", |m| m.l_sa),
    ("L_total", |m| m.l_total),
    ("kept_frac", |m| m.kept_frac),
];

/// Long-format `(series, x, y)` rows for one report. Series without any
/// value are omitted; `x` is the batch index.
fn series(report: &RunReport) -> Vec<(String, usize, f64)> {
    let mut rows = Vec::new();
    for (k, model) in report.models.iter().enumerate() {
        let name = format!("acc_{}", model.id);
        rows.extend(
            report
                .metrics
                .iter()
                .filter_map(|m| m.acc_models.get(k).map(|&a| (name.clone(), m.batch, a))),
        );
    }
    for (name, get) in SCALARS {
        rows.extend(
            report
                .metrics
                .iter()
                .filter_map(|m| get(m).map(|y| (name.to_string(), m.batch, y))),
        );
    }
    rows
}

fn strategy_name(report: &RunReport) -> Result<String> {
    Ok(serde_json::to_value(report.config.strategy)?
        .as_str()
        .unwrap_or_default()
        .to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| x.to_string())
}

/// Aggregates every report below `input` into a plot-data CSV and a
/// per-run summary CSV.
pub fn report(input: &Path, plot_data: &Path, summary: &Path) -> Result<()> {
    let paths = find_reports(input)?;
    let reports = paths
        .iter()
        .map(|p| RunReport::load(p).map(|r| (run_name(input, p), r)))
        .collect::<Result<Vec<_>>>()?;
    let single = reports.len() == 1;

    let mut plot = csv::Writer::from_writer(Vec::new());
    plot.write_record(["series", "x", "y"])?;
    for (name, r) in &reports {
        for (s, x, y) in series(r) {
            let s = if single { s } else { format!("{name}/{s}") };
            plot.write_record([s, x.to_string(), y.to_string()])?;
        }
    }

    let mut table = csv::Writer::from_writer(Vec::new());
    table.write_record([
        "run",
        "strategy",
        "seed",
        "corruptions",
        "samples",
        "models",
        "acc_models",
        "acc_combined",
        "tau_final",
    ])?;
    for (name, r) in &reports {
        let o = &r.overall;
        let labels: Vec<&str> = r.corruptions.iter().map(|c| c.label.as_str()).collect();
        let ids: Vec<&str> = r.models.iter().map(|m| m.id.as_str()).collect();
        let accs: Vec<String> = o.models.iter().map(f64::to_string).collect();
        table.write_record([
            name.clone(),
            strategy_name(r)?,
            r.seeds.run.to_string(),
            labels.join(";"),
            o.samples.to_string(),
            ids.join(";"),
            accs.join(";"),
            fmt_opt(o.combined),
            fmt_opt(o.tau.as_ref().map(|t| t.last)),
        ])?;
    }

    let finish = |w: csv::Writer<Vec<u8>>| {
        w.into_inner()
            .map_err(|e| CocaError::invalid(format!("csv buffer: {e}")))
    };
    write_atomic(plot_data, &finish(plot)?)?;
    write_atomic(summary, &finish(table)?)?;
    println!(
        "{} report(s) -> {}, {}",
        reports.len(),
        plot_data.display(),
        summary.display()
    );
    Ok(())
}
