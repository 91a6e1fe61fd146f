//! `maskcast`: ingest data, train, backtest and forecast from one config file.
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 data error,
//! 3 training failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use maskcast::error::ErrorKind;
use maskcast::training::Method;

#[derive(Debug, Parser)]
#[command(name = "maskcast", version, about = "Masked multi-step probabilistic demand forecasting")]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output root.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate raw hourly CSV files and write the daily dataset.
    Ingest {
        files: Vec<PathBuf>,
        /// Output file; defaults to `<out>/dataset.csv`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Write the synthetic dataset described by the config.
    Synth {
        /// Output file; defaults to `<out>/<name>/dataset.csv`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and epoch log.
    Train {
        /// Overrides the config method.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Roll forecasts over the test span and write report files.
    Backtest {
        /// Checkpoints to evaluate; defaults to the config's model and method.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Forecast `horizon` days from one origin.
    Forecast {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First forecast day, YYYY-MM-DD.
        #[arg(long)]
        origin: NaiveDate,
        /// Number of days to forecast.
        #[arg(long)]
        horizon: usize,
    },
    /// Merge saved backtest results into one set of report files.
    Report {
        /// Saved results; defaults to every `eval_*.json` in the report directory.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Training => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
