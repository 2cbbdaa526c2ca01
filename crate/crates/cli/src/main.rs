//! `aurec`: preprocess interaction logs, train, evaluate, and probe the
//! geometry of embedding dumps.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use aurec_core::trainer::TrainError;
use aurec_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "aurec", version, about = "Alignment/uniformity collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deduplicate, k-core filter and remap a raw interaction log.
    Preprocess(PreprocessArgs),
    /// Train a model on a remapped interaction file.
    Train(TrainArgs),
    /// Full-ranking metrics and geometry of a trained checkpoint.
    Eval(EvalArgs),
    /// Geometry of an arbitrary embedding dump over an interaction file.
    Probe(ProbeArgs),
    /// Write a synthetic two-community interaction file.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Remapped `user<TAB>item` output; ID maps and stats are written next to it.
    #[arg(long)]
    pub output: PathBuf,
    /// `tab`, `comma`, or a single character.
    #[arg(long, default_value = "tab")]
    pub delimiter: String,
    #[arg(long, default_value_t = 5)]
    pub k_core: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Remapped interaction file (tab separated).
    #[arg(long)]
    pub data: PathBuf,
    /// `key=value` config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override a config entry; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Record per-epoch wall-clock time in the trace (makes traces non-reproducible).
    #[arg(long)]
    pub timing: bool,
    /// Suppress per-epoch progress on stderr.
    #[arg(long, short)]
    pub quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Validation,
    Test,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Embedding dump written by `train`; its `.meta` sidecar must sit next to it.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 50])]
    pub ks: Vec<usize>,
    /// Measure geometry over all interactions instead of the training split.
    #[arg(long)]
    pub all_interactions: bool,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Remapped interaction file whose IDs index the dump rows.
    #[arg(long)]
    pub interactions: PathBuf,
    #[arg(long, default_value = "tab")]
    pub delimiter: String,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub users: usize,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    #[arg(long, default_value_t = 10)]
    pub per_user: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Diverged(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidRatios(_) => CliError::Usage(e.to_string()),
            Error::DivergedGradient { .. } => CliError::Diverged(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Failed(inner) => inner.into(),
            diverged @ TrainError::Diverged { .. } => CliError::Diverged(diverged.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
