//! `cardio4d`: synthetic data, shape-prior pretraining, silhouette fitting
//! and evaluation.

mod commands;
mod error;
mod model_io;
mod scoring;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::commands::{crossview, generate, metrics, pretrain, reconstruct};
use crate::error::Result;
use crate::settings::{Overrides, CONFIG_ENV};

#[derive(Debug, Parser)]
#[command(name = "cardio4d", version, about)]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, short, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory (`paths.dataset`).
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Model checkpoint (`paths.checkpoint`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory (`paths.output`).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// Override any config value, e.g. `--set tto.steps=500`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More log output (repeat for debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic shape dataset.
    Generate(generate::GenerateArgs),
    /// Train the shape decoder and mask encoder.
    Pretrain(pretrain::PretrainArgs),
    /// Fit a shape (or a sequence) to segmentation masks.
    Reconstruct(reconstruct::ReconstructArgs),
    /// Score withheld views with and without refinement.
    EvalCrossview(crossview::CrossViewArgs),
    /// Mesh and mask distances, or a summary of earlier reports.
    Metrics(metrics::MetricsArgs),
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn run(cli: &Cli) -> Result<()> {
    let ov = Overrides {
        seed: cli.seed,
        dataset: cli.dataset.clone(),
        checkpoint: cli.checkpoint.clone(),
        output: cli.output.clone(),
        set: cli.set.clone(),
    };
    let cfg = settings::load(cli.config.as_deref(), &ov)?;
    log::debug!("build {}", cardio_core::config::build_id());
    match &cli.command {
        Command::Generate(a) => generate::run(&cfg, a),
        Command::Pretrain(a) => pretrain::run(&cfg, a),
        Command::Reconstruct(a) => reconstruct::run(&cfg, a),
        Command::EvalCrossview(a) => crossview::run(&cfg, a),
        Command::Metrics(a) => metrics::run(&cfg, a),
        Command::ShowConfig => {
            print!("{}", settings::to_toml(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let version: &'static str = Box::leak(cardio_core::config::build_id().into_boxed_str());
    let parsed = Cli::command()
        .version(version)
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
