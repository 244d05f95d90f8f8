use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::TaskKind;

#[derive(Debug, Parser)]
#[command(
    name = "cro",
    version,
    about = "Conformal uncertainty sets for conditional robust optimization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV.
    GenData(GenDataArgs),
    /// Train a score model and write a checkpoint plus the data splits.
    Train(TrainArgs),
    /// Store a conformal threshold computed on held-out data in a checkpoint.
    Calibrate(CalibrateArgs),
    /// Robust decision for a single input row, as JSON.
    Solve(SolveArgs),
    /// Task loss, coverage and robust value of a calibrated checkpoint on test data.
    Eval(EvalArgs),
    /// Train, calibrate and evaluate every seed x alpha x run cell of a config.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(value_enum)]
    pub task: TaskKind,
    /// Portfolio rows.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Battery days.
    #[arg(long, default_value_t = 400)]
    pub days: usize,
    #[arg(long, env = "CRO_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Output CSV (default: `<task>.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the first config seed.
    #[arg(long, env = "CRO_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "CRO_THREADS")]
    pub threads: Option<usize>,
    /// Overrides `train.epochs` (and `train.pretrain_epochs`).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Calibration CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the first `alphas` entry of the stored config.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Output checkpoint (default: overwrite the input, which needs `--force`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Calibration CSV.
    #[arg(long)]
    pub cal: PathBuf,
    #[arg(long)]
    pub alpha: f64,
    /// Comma-separated raw feature values.
    #[arg(long, conflicts_with_all = ["x_csv", "row"], required_unless_present = "x_csv")]
    pub x: Option<String>,
    /// Take the input from row `--row` of this CSV instead.
    #[arg(long, requires = "row")]
    pub x_csv: Option<PathBuf>,
    #[arg(long)]
    pub row: Option<usize>,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed column of the metrics row (default: the training seed).
    #[arg(long, env = "CRO_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "CRO_THREADS", default_value_t = 0)]
    pub threads: usize,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Replaces the config seed list with this single seed.
    #[arg(long, env = "CRO_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "CRO_THREADS")]
    pub threads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub force: bool,
}
