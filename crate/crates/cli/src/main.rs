//! `laploss`: train, evaluate and apply Laplacian-pyramid enhancement models.
//!
//! Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
//! command fails while running (for example a training abort).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use laploss_core::data::{Split, SynthMode};

#[derive(Parser)]
#[command(name = "laploss", version, about = "Laplacian-pyramid adversarial training for contrast enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator and its per-level discriminators.
    Train(TrainArgs),
    /// Score a checkpoint on dataset splits.
    Eval(EvalArgs),
    /// Enhance a single image.
    Enhance(EnhanceArgs),
    /// Write the Laplacian pyramid of an image.
    Decompose(DecomposeArgs),
    /// Generate a synthetic paired dataset.
    Synth(SynthArgs),
    /// Train one model per level-weight setting and tabulate the scores.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to score; repeatable. Defaults to every test split with samples.
    #[arg(long)]
    pub split: Vec<Split>,
    /// Run config whose model must match the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for JSON and CSV reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, requires = "width")]
    pub height: Option<usize>,
    #[arg(long, requires = "height")]
    pub width: Option<usize>,
}

#[derive(Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub levels: usize,
    /// Reload the numeric dump, reconstruct and print the maximum error.
    #[arg(long)]
    pub reconstruct: bool,
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value = "ladder")]
    pub mode: SynthMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Enhance(a) => commands::enhance(a),
        Command::Decompose(a) => commands::decompose(a),
        Command::Synth(a) => commands::synth(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
