mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "ddl", version, about = "Deep dictionary learning experiments")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (default `ddl-out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes a checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Classification accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Images rebuilt from the top-level codes.
    Reconstruct(ReconstructArgs),
    /// DeepFool and random-noise fooling rates.
    Attack(CheckpointArg),
    /// Mutual information between the input and each layer's output.
    Mi(MiArgs),
    /// Asymptotic LASSO predictor against Monte Carlo.
    Asymptotics(AsymptoticsArgs),
    /// Finite-difference check of the analytic gradients.
    CheckGrad(CheckGradArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct MiArgs {
    /// One or more training snapshots.
    #[arg(long, required = true, num_args = 1..)]
    pub checkpoint: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AsymptoticsArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub sigma2: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub k: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 400)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct CheckGradArgs {
    /// Training images in the checked batch.
    #[arg(long, default_value_t = 4)]
    pub images: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-3)]
    pub threshold: f64,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<ddl::error::DdlError> for CliError {
    fn from(e: ddl::error::DdlError) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            let first = rendered.lines().next().unwrap_or("usage error");
            eprintln!("{}", error_line("usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("{}", error_line("usage", &msg));
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("{}", error_line("runtime", &format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}
