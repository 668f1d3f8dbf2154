//! `mssl`: synthesize scenes, localize sounding objects, score predictions,
//! train projections and verify gradients.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

/// Exit statuses beyond the generic failure (1).
pub mod exit {
    pub const FORMAT: u8 = 2;
    pub const DIMENSION: u8 = 3;
    pub const MISSING_CASE: u8 = 4;
    pub const CONFIG: u8 = 5;
}

#[derive(Parser)]
#[command(
    name = "mssl",
    version,
    about = "Multi-sound-source localization on feature grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArg {
    /// Flat TOML config; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of synthetic scenes with ground truth.
    Synth(commands::SynthArgs),
    /// Localize objects in a feature/audio pair or a synthetic dataset.
    Localize(commands::LocalizeArgs),
    /// Score a directory of predictions against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Train the feature projections on synthetic scenes.
    Train(commands::TrainArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(commands::GradcheckArgs),
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("SSL_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            mssl_core::Error::Config(format!(
                "SSL_THREADS must be a positive integer, got {value:?}"
            ))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

/// Maps the first recognizable cause to an exit status.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<mssl_core::Error>() {
            return match e {
                mssl_core::Error::Format(_) => exit::FORMAT,
                mssl_core::Error::Dimension(_) => exit::DIMENSION,
                mssl_core::Error::Config(_) => exit::CONFIG,
                _ => 1,
            };
        }
        if cause.is::<commands::MissingCase>() {
            return exit::MISSING_CASE;
        }
        if cause.is::<serde_json::Error>() {
            return exit::FORMAT;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Localize(a) => commands::localize(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Train(a) => commands::train(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
