//! `noilin` — run adversarial-training experiments from declarative configs.
//!
//! Subcommands: `gen-data` (synthetic datasets), `train` (full runs with
//! per-epoch CSV logs and checkpoints), `eval` (accuracy and margin reports
//! for a checkpoint), `attack` (one-shot adversarial-example dumps).
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O.
//! `NOILIN_THREADS` caps worker parallelism (default: available cores).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use noilin_core::error::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                CoreError::NonFinite { .. } => 3,
                CoreError::Io { .. }
                | CoreError::IdxBadMagic { .. }
                | CoreError::IdxTruncated { .. }
                | CoreError::IdxCountMismatch { .. }
                | CoreError::Csv { .. }
                | CoreError::Checkpoint { .. } => 4,
                _ => 2,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "noilin",
    version,
    about = "Desk-scale adversarial training with label-noise injection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV plus JSON sidecar).
    GenData(GenDataArgs),
    /// Train from a JSON experiment config into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: natural/robust accuracy and logit margins.
    Eval(EvalArgs),
    /// Dump adversarial examples for a checkpoint and dataset.
    Attack(AttackArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Ternary Gaussian classification task.
    #[arg(long)]
    pub ternary: bool,
    /// Total sample count (a multiple of 3).
    #[arg(long)]
    pub n: usize,
    /// Per-class standard deviation.
    #[arg(long, default_value_t = 0.8)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV path; the sidecar lands at `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON experiment config.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// IDX image file (with --idx-labels).
    #[arg(long)]
    pub idx_images: Option<PathBuf>,
    #[arg(long)]
    pub idx_labels: Option<PathBuf>,
    /// Attack names: `pgd<steps>` or `cw<steps>`; repeatable.
    #[arg(long)]
    pub attack: Vec<String>,
    /// L-infinity radius for the attacks.
    #[arg(long, default_value_t = 8.0 / 255.0)]
    pub epsilon: f64,
    /// CW hinge margin.
    #[arg(long, default_value_t = 0.0)]
    pub kappa: f64,
    /// Run seed for attack randomness; defaults to the run metadata next to
    /// the checkpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for eval.csv and margins.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub idx_images: Option<PathBuf>,
    #[arg(long)]
    pub idx_labels: Option<PathBuf>,
    #[arg(long, default_value_t = 8.0 / 255.0)]
    pub epsilon: f64,
    /// Step size; defaults to 2.5 * epsilon / steps.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    /// Inner objective: ce or cw.
    #[arg(long, default_value = "ce")]
    pub objective: String,
    #[arg(long, default_value_t = 0.0)]
    pub kappa: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_random_start: bool,
    /// Output CSV of adversarial examples (dataset schema).
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() {
    let threads = std::env::var("NOILIN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = threads {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(args) => commands::gen_data(args),
        Command::Train(args) => commands::train(&args.config, args.out.as_deref()),
        Command::Eval(args) => commands::eval(args),
        Command::Attack(args) => commands::attack(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
