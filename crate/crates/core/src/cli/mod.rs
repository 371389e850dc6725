//! `coca` command line.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use coca::error::{CocaError, Result};

mod commands;
mod plot;

#[derive(Parser, Debug)]
#[command(
    name = "coca",
    version,
    about = "Cross-model test-time adaptation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train every model of a config on its source task and save checkpoints.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stream the corrupted test set through the configured strategy.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding `<model id>.cock` files; models are pretrained
        /// in-process when omitted.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a config over the Cartesian product of a grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// JSON object mapping config keys to lists of values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate every report.json below a directory into tables and plot data.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        /// Long-format `series,x,y` CSV.
        #[arg(long)]
        plot_data: Option<PathBuf>,
        /// One row per report and corruption.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Write a config's source or test data as a COCD (or CSV) file.
    DatasetExport {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Apply the config's corruption with this index to the test split.
        #[arg(long)]
        corruption: Option<usize>,
        /// Output path; a `.csv` extension selects CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert a CSV of `features..., label` rows into a COCD file.
    DatasetImport {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-sample shape, e.g. `3,8,8`; flat rows when omitted.
        #[arg(long, value_delimiter = ',')]
        shape: Option<Vec<usize>>,
        /// Defaults to the largest label plus one.
        #[arg(long)]
        num_classes: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Output root for commands run without `--out`.
fn out_root() -> PathBuf {
    std::env::var_os("COCA_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("coca_out"))
}

fn out_dir(given: Option<PathBuf>, name: &str) -> PathBuf {
    given.unwrap_or_else(|| out_root().join(name))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CocaError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out, seed } => {
            commands::pretrain(&config, &out_dir(out, "checkpoints"), seed)
        }
        Command::Adapt {
            config,
            checkpoints,
            out,
            seed,
        } => commands::adapt(
            &config,
            checkpoints.as_deref(),
            &out_dir(out, "adapt"),
            seed,
        ),
        Command::Sweep {
            config,
            grid,
            checkpoints,
            out,
            parallel,
            seed,
        } => commands::sweep(
            &config,
            &grid,
            checkpoints.as_deref(),
            &out_dir(out, "sweep"),
            parallel,
            seed,
        ),
        Command::Report {
            input,
            plot_data,
            summary,
        } => {
            let plot_data = plot_data.unwrap_or_else(|| input.join("plot_data.csv"));
            let summary = summary.unwrap_or_else(|| input.join("report_summary.csv"));
            plot::report(&input, &plot_data, &summary)
        }
        Command::DatasetExport {
            config,
            split,
            corruption,
            out,
            seed,
        } => commands::dataset_export(&config, split, corruption, &out, seed),
        Command::DatasetImport {
            input,
            out,
            shape,
            num_classes,
        } => commands::dataset_import(&input, &out, shape, num_classes),
    }
}
