//! `parlor`: validate, run, batch, serve and replay conversation experiments.
//!
//! Exit codes: 0 success, 1 validation or user error, 2 runtime failure.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "parlor", version, about = "Multi-participant conversation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file and list every violation.
    Validate { config: PathBuf },
    /// Run one session.
    Run {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory, created if absent.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Zero run id and start time for byte-comparable transcripts.
        #[arg(long)]
        golden: bool,
    },
    /// Run many independent sessions of one config.
    Batch {
        config: PathBuf,
        #[arg(long)]
        runs: u64,
        /// Base seed; defaults to the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        golden: bool,
    },
    /// Host live sessions over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value = "parlor-data")]
        data_dir: PathBuf,
    },
    /// Render a transcript file.
    Replay {
        transcript: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Text,
    Table,
}

/// Errors split by exit code.
#[derive(Debug)]
pub enum CliError {
    User(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { config } => commands::validate(&config),
        Command::Run {
            config,
            seed,
            out,
            golden,
        } => commands::run(&config, seed, &out, golden),
        Command::Batch {
            config,
            runs,
            seed,
            parallel,
            out,
            golden,
        } => commands::batch(&config, runs, seed, parallel, &out, golden),
        Command::Serve { addr, data_dir } => commands::serve(&addr, &data_dir),
        Command::Replay { transcript, format } => commands::replay(&transcript, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (CliError::User(err) | CliError::Runtime(err)) = &e;
            eprintln!("error: {err:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
