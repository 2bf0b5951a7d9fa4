//! `chanfluence`: synthetic data, training, influence, anomaly detection
//! and channel pruning from flat JSON configs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use config::{
    ConfigError, DetectCommandConfig, InfluenceCommandConfig, Overrides, PruneCommandConfig, SynthConfig,
    TrainCommandConfig, Validate,
};

#[derive(Parser)]
#[command(
    name = "chanfluence",
    version,
    about = "Channel-wise influence for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset as CSV.
    Synth(Common),
    /// Train a model on `<data>/train.csv` and save a checkpoint.
    Train(Common),
    /// Channel-wise influence matrix or per-channel self-influence.
    Influence(Common),
    /// Influence-based anomaly detection with a JSON summary and score CSV.
    Detect(Common),
    /// Channel pruning across strategies, subset sizes and seeds.
    Prune(Common),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
    /// Override one config field, e.g. `--set normalization=median_iqr`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load<C: DeserializeOwned + Validate>(&self) -> anyhow::Result<C> {
        let overrides = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            threads: self.threads,
            set: self.set.clone(),
        };
        config::load(self.config.as_deref(), &overrides)
    }
}

fn init_threads(threads: Option<usize>) -> anyhow::Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(config::config_error(
                "invalid config field `threads`: must be at least 1",
            ));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(c) => {
            let config: SynthConfig = c.load()?;
            init_threads(config.threads)?;
            commands::synth(&config)
        }
        Command::Train(c) => {
            let config: TrainCommandConfig = c.load()?;
            init_threads(config.threads)?;
            commands::train_cmd(&config)
        }
        Command::Influence(c) => {
            let config: InfluenceCommandConfig = c.load()?;
            init_threads(config.threads)?;
            commands::influence_cmd(&config)
        }
        Command::Detect(c) => {
            let config: DetectCommandConfig = c.load()?;
            init_threads(config.threads)?;
            commands::detect_cmd(&config)
        }
        Command::Prune(c) => {
            let config: PruneCommandConfig = c.load()?;
            init_threads(config.threads)?;
            commands::prune_cmd(&config)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<ConfigError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
