//! `acan`: generate the synthetic benchmark, train and evaluate variants,
//! run the ablation matrix, and verify gradients.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
//! Verbosity follows `ACAN_LOG` (`error`, `info` or `debug`).

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "acan",
    version,
    about = "Adversarial correlation adaptation for video action recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic bright/dark benchmark described by a config.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant; writes config.json, metrics.jsonl, summary.csv
    /// and params/ into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `train.variant`.
        #[arg(long)]
        variant: Option<String>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-1 accuracy of a parameter dump on every split of a dataset.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train every listed variant under N consecutive seeds starting at
    /// `train.seed`.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variant names, or `all`.
        #[arg(long)]
        variants: String,
        #[arg(long)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-channel brightness statistics of every split.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write f, f_c and the PCM of every clip for external visualization.
    DumpFeatures {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Configuration helpers.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
}

#[derive(Subcommand, Debug)]
enum ConfigAction {
    /// Print the complete default run config.
    ShowDefaults,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(acan::Error),
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_usage() => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<acan::Error> for CliError {
    fn from(e: acan::Error) -> Self {
        CliError::Core(e)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData { config, out } => commands::generate_data(&config, &out),
        Command::Train {
            config,
            out,
            variant,
            seed,
        } => commands::train(&config, out, variant, seed),
        Command::Eval { params, data } => commands::eval(&params, &data),
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
        } => commands::ablate(&config, &variants, seeds, out),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
        Command::Stats { data } => commands::stats(&data),
        Command::DumpFeatures { params, data, out } => {
            commands::dump_features(&params, &data, &out)
        }
        Command::Config {
            action: ConfigAction::ShowDefaults,
        } => {
            print!("{}", config::RunConfig::default().to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACAN_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acan: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
