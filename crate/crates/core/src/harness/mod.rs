//! Experiment orchestration: run configs, the streaming adaptation loop,
//! metrics and reports, and ablation sweeps.

mod config;
mod report;
mod run;
mod sweep;

pub use config::{ModelEntry, RunConfig, Strategy, SCHEMA_VERSION};
pub use report::{
    evaluate_accuracy, metrics_csv, read_metrics_csv, write_metrics_csv, AccuracySummary,
    CorruptionReport, MetricsRecord, ModelSummary, RunReport, SeedRecord, TauSummary,
    METRICS_COLUMNS,
};
pub use run::{
    model_seed, prepare_models, pretrain_entry, run, run_with_models, source_data, test_pool,
};
pub use sweep::{ablation_sweep, expand_grid, summary_csv, Grid, SweepPoint};
