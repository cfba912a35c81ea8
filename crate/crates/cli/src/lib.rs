//! Command-line driver: dataset generation, training, prediction, evaluation
//! and gradient diagnostics, each a pure function of config, seed and inputs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

pub use config::RunConfig;

/// A diagnostic ran to completion and found a problem (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

#[derive(Debug, Parser)]
#[command(name = "moes", version, about = "Mixture-of-experts saliency prediction")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the data, training and metric seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory of this command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train a mixture, a single-expert baseline or an averaging ensemble.
    Train(commands::train::TrainArgs),
    /// Write saliency maps, previews and gate probabilities for images.
    Predict(commands::predict::PredictArgs),
    /// Score checkpoints or precomputed maps against a dataset.
    Eval(commands::eval::EvalArgs),
    /// Compare analytic and finite-difference gradients on a miniature model.
    Gradcheck(commands::gradcheck::GradcheckArgs),
}

/// Exit code for an error: 2 for bad configuration, arguments or inputs,
/// 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<CheckFailed>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<moes_core::Error>() {
            return match e {
                moes_core::Error::NonFinite(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::load(cli.global.config.as_deref(), cli.global.seed)?;
    let out = cli.global.out.clone();
    match cli.command {
        Command::GenData => commands::gen_data::run(&cfg, out),
        Command::Train(args) => commands::train::run(&cfg, out, &args),
        Command::Predict(args) => commands::predict::run(&cfg, out, &args),
        Command::Eval(args) => commands::eval::run(&cfg, out, &args),
        Command::Gradcheck(args) => commands::gradcheck::run(&cfg, out, &args),
    }
}

/// Parses `std::env::args`, runs the command and reports errors on stderr.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
