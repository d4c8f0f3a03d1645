//! `mrf-forge`: dictionary simulation, network training, phantom
//! reconstruction, network analysis and cost benchmarks.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{ConfigError, Report};
use config::EngineChoice;

#[derive(Parser)]
#[command(name = "mrf-forge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dictionary into `dictionary.mrfd`.
    SimDict {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute the subspace and train the network into `model.mrfn`.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Phantom, undersampled acquisition, back-projection and maps.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's engine.
        #[arg(long, value_enum)]
        engine: Option<EngineChoice>,
        /// Overrides the config's samples per frame.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Slope segments or matched filters of a trained network.
    Analyze {
        #[arg(value_enum)]
        report: Report,
        #[arg(long)]
        config: PathBuf,
    },
    /// Cost model and wall-clock comparison of matching and the network.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(ConfigError("--threads must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::SimDict { config } => commands::sim_dict(&config, out),
        Command::Train { config } => commands::train_cmd(&config, out),
        Command::Reconstruct { config, engine, m } => {
            commands::reconstruct(&config, out, engine, m)
        }
        Command::Analyze { report, config } => commands::analyze(report, &config, out),
        Command::Bench { config } => commands::bench(&config, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
