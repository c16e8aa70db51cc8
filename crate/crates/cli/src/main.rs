//! `tft-retail`: descriptive statistics, training, cross-validation,
//! forecasting, interpretation, and model comparison for the weekly
//! store-sales panel.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tft-retail", version, about = "Multi-horizon retail sales forecasting with a Temporal Fusion Transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Weekly sales CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is fully deterministic.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Flat key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Descriptive statistics table.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Train on the hold-out protocol and evaluate on the held-out weeks.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Expanding-origin cross-validation.
    Cv {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        folds: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Quantile forecast for one store from a checkpoint.
    Forecast {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: u32,
        /// Last encoder week (`t_idx`); defaults to the store's last week.
        #[arg(long)]
        origin: Option<u32>,
    },
    /// Attention by lag, variable importance, and store ranking.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and score several models on identical hold-out windows.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated: tft, cnn, lstm, cnn_lstm, seasonal_naive, or all.
        #[arg(long, value_delimiter = ',')]
        kinds: Vec<String>,
        /// External forecast CSV (`store,origin_t,horizon,prediction`), named by file stem.
        #[arg(long)]
        external: Vec<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Write a deterministic synthetic panel with the reference layout.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 45)]
        stores: u32,
        #[arg(long, default_value_t = 143)]
        weeks: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats { common } => commands::stats(&common),
        Command::Train { common, max_epochs } => commands::train(&common, max_epochs),
        Command::Cv {
            common,
            folds,
            max_epochs,
        } => commands::cv(&common, folds.map(|f| f as usize), max_epochs),
        Command::Forecast {
            common,
            checkpoint,
            store,
            origin,
        } => commands::forecast(&common, &checkpoint, store, origin),
        Command::Explain { common, checkpoint } => commands::explain(&common, &checkpoint),
        Command::Compare {
            common,
            kinds,
            external,
            max_epochs,
        } => commands::compare(&common, &kinds, &external, max_epochs),
        Command::Synth {
            common,
            stores,
            weeks,
        } => commands::synth(&common, stores, weeks),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
