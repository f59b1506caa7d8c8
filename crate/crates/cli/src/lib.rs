//! Command-line driver: dataset preparation, training, scoring, evaluation,
//! weight sweeps and reconstruction export.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;
use velc_core::VelcError;

pub use commands::{
    cmd_eval, cmd_export_recon, cmd_prepare, cmd_score, cmd_sweep, cmd_train, PrepareOutput,
    SweepRow, TrainOutput,
};
pub use config::{load_key_values, resolve_train_config, score_params};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] VelcError),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::Usage(_) => "E_USAGE",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "velc", version, about = "Time-series anomaly detection with a constrained variational LSTM autoencoder")]
pub struct Cli {
    /// Seed for every random choice (split, initialization, batches, noise).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DatasetKind {
    /// Delimited text, class label first.
    Ucr,
    /// KDD Cup 99 records.
    Kdd99,
    /// Generated sine windows with spike anomalies.
    Synthetic,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw data, relabel, split and scale into canonical train/test files.
    Prepare(PrepareArgs),
    /// Train a model on a prepared training file.
    Train(TrainArgs),
    /// Score a prepared file with a trained checkpoint.
    Score(ScoreArgs),
    /// Compute the AUC of a score file.
    Eval(EvalArgs),
    /// AUC across score weightings from cached error components.
    Sweep(SweepArgs),
    /// Write original and reconstructed series side by side.
    ExportRecon(ExportArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long, value_enum, default_value = "ucr")]
    pub kind: DatasetKind,
    /// Raw input files; several UCR files are concatenated.
    #[arg(long = "input", num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset name (defaults to the input file stem).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Prepared training file.
    #[arg(long)]
    pub train: PathBuf,
    /// Output directory for the checkpoint, loss log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Hyperparameter preset: ucr, arrhythmia or kdd99.
    #[arg(long, default_value = "ucr")]
    pub preset: String,
    /// `key = value` file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Suppress per-interval loss lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args, Clone, Copy)]
pub struct WeightArgs {
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Defaults to `1 − alpha`.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub phi: f64,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prepared file to score.
    #[arg(long)]
    pub data: PathBuf,
    /// Score file to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub weights: WeightArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub scores: PathBuf,
    /// Results table to append the report row to.
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Score file whose cached components are re-weighted.
    #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
    pub scores: Option<PathBuf>,
    /// Checkpoint to compute components with (together with --data).
    #[arg(long, requires = "data")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    pub data: Option<PathBuf>,
    /// Comma-separated alpha values in (0, 1); beta is `1 − alpha`.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.4,0.6,0.8")]
    pub alphas: Vec<f64>,
    /// Table to write in addition to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated row indices of the prepared file.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ids: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed invocation, writing human-readable results to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Prepare(a) => {
            let out = cmd_prepare(&a, seed.unwrap_or(0))?;
            print!("{}", out.manifest);
        }
        Command::Train(a) => {
            let out = cmd_train(&a, seed)?;
            println!("checkpoint\t{}", out.checkpoint.display());
            println!("log\t{}", out.log.display());
            println!("manifest\t{}", out.manifest.display());
        }
        Command::Score(a) => {
            let file = cmd_score(&a)?;
            let flagged = file.records.iter().filter(|r| r.flag).count();
            println!("scored\t{}\tflagged\t{}", file.records.len(), flagged);
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", velc_core::EvalReport::HEADER);
            println!("{}", report.to_row());
        }
        Command::Sweep(a) => {
            let rows = cmd_sweep(&a)?;
            print!("{}", commands::sweep_table(&rows));
        }
        Command::ExportRecon(a) => {
            let n = cmd_export_recon(&a)?;
            println!("exported\t{n}");
        }
    }
    Ok(())
}
