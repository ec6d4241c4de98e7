mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Misuse of the command line or config. Exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "tcrf", version, about = "Transformer-CRF clinical sequence labelling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and canonicalise CoNLL files, splitting off a dev set.
    Prepare(PrepareArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Tag a corpus with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Train once per batch size and write one epoch log per run.
    Sweep(SweepArgs),
    /// Write a synthetic clinical corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Use this dev file instead of splitting the training file.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub dev_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set batch_size=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub emissions: Option<PathBuf>,
    #[arg(long)]
    pub dev_emissions: Option<PathBuf>,
    #[arg(long)]
    pub report_epoch: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Precomputed emissions, required for frozen-emission checkpoints.
    #[arg(long)]
    pub emissions: Option<PathBuf>,
    /// Also write the model's emission scores to this file.
    #[arg(long)]
    pub emit_emissions: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Label printed in the table title.
    #[arg(long, default_value = "final")]
    pub report_epoch: String,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated, e.g. `1,4,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub batch_sizes: Vec<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub dev: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Train(a) => commands::train(&a),
        Command::Predict(a) => commands::predict(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Synth(a) => commands::synth(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
