//! Command-line experiment runner for sparse continuous normalizing flows
//! and neural ODE classifiers.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::Map;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::ExperimentConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "sparseflow", version, about = "Train, prune and analyze continuous-depth models on 2D data")]
pub struct Cli {
    /// JSON configuration; unspecified keys take the defaults of the dataset kind.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `train.lr=0.005` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prune/retrain one flow, checkpointing every iteration.
    Train {
        /// Discard checkpoints already in the output directory.
        #[arg(long)]
        fresh: bool,
    },
    /// Train every seed and variant and tabulate NLL against prune ratio.
    Sweep {
        #[arg(long)]
        fresh: bool,
    },
    /// Hessian spectrum and trace of each checkpoint.
    Hessian {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples, score mode coverage and export density and field grids.
    Sample {
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prune/retrain the moons classifier and export its decision boundary.
    Classify {
        #[arg(long)]
        fresh: bool,
    },
}

fn overrides(set: &[String]) -> Result<Map<String, serde_json::Value>, CliError> {
    set.iter().map(|s| config::parse_override(s)).collect()
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let from_checkpoint = matches!(cli.command, Command::Hessian { .. } | Command::Sample { .. });
    if from_checkpoint && cli.config.is_some() {
        return Err(CliError::Usage(
            "hessian and sample read their configuration from the checkpoint; use --set to adjust it".into(),
        ));
    }
    match &cli.command {
        Command::Train { fresh } => commands::train(&config::load(cli.config.as_deref(), &cli.set)?, *fresh),
        Command::Sweep { fresh } => commands::sweep(&config::load(cli.config.as_deref(), &cli.set)?, *fresh),
        Command::Classify { fresh } => commands::classify(&config::load(cli.config.as_deref(), &cli.set)?, *fresh),
        Command::Hessian { checkpoints, out } => commands::hessian(checkpoints, &overrides(&cli.set)?, out.as_deref()),
        Command::Sample { checkpoint, out } => commands::sample(checkpoint, &overrides(&cli.set)?, out.as_deref()),
    }
}
