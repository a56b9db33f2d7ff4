//! Command-line front end for training and evaluating the autoencoders.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Outcome;
pub use error::{CliError, Result};

use config::FlagOverrides;

#[derive(Debug, Parser)]
#[command(name = "ffae", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("FFAE_BUILD_ID"), ")"))]
#[command(about = "Train and evaluate forward-forward and backpropagation channel autoencoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.ffae and convergence.csv.
    Train(Common),
    /// Estimate the BLER of a checkpoint at one Eb/N0; appends to evaluate.csv.
    Evaluate(WithCheckpoint),
    /// BLER over an Eb/N0 grid; writes sweep.csv and codewords.csv.
    Sweep(WithCheckpoint),
    /// Train forward-forward networks over a size grid; writes size_sweep.csv.
    SizeSweep(Common),
    /// Finite-difference check of every gradient path.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
pub struct WithCheckpoint {
    /// Checkpoint to load.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: $FFAE_OUT_DIR, else ./runs).
    #[arg(long)]
    pub out_dir: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// ff, bp or bp-rl.
    #[arg(long = "algo")]
    pub algorithm: Option<String>,
    /// awgn or rbf.
    #[arg(long)]
    pub channel: Option<String>,
    /// normalize or quantize.
    #[arg(long)]
    pub stage: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Training Eb/N0 in dB.
    #[arg(long = "train-ebn0", allow_negative_numbers = true)]
    pub train_ebn0_db: Option<f64>,
    /// Evaluation Eb/N0 in dB.
    #[arg(long = "ebn0", allow_negative_numbers = true)]
    pub eval_ebn0_db: Option<f64>,
    /// Arbitrary override, `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

impl Common {
    fn overrides(&self) -> FlagOverrides {
        FlagOverrides {
            algorithm: self.algorithm.clone(),
            seed: self.seed,
            out_dir: self.out_dir.clone(),
            channel: self.channel.clone(),
            stage: self.stage.clone(),
            iterations: self.iterations,
            train_ebn0_db: self.train_ebn0_db,
            eval_ebn0_db: self.eval_ebn0_db,
            sets: self.sets.clone(),
        }
    }

    pub fn resolve(&self) -> Result<config::ExperimentConfig> {
        config::load(self.config.as_deref(), self.overrides())
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::Evaluate(w) => commands::evaluate(&w.common.resolve()?, &w.checkpoint),
        Command::Sweep(w) => commands::run_sweep(&w.common.resolve()?, &w.checkpoint),
        Command::SizeSweep(c) => commands::run_size_sweep(&c.resolve()?),
        Command::Gradcheck(c) => commands::gradcheck(&c.resolve()?),
    }
}

/// Process exit code for an outcome: 0 success, 1 error, 2 failed gradient check.
pub fn exit_code(result: &Result<Outcome>) -> u8 {
    match result {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::GradcheckFailed) => 2,
        Err(_) => 1,
    }
}
