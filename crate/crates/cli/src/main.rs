//! `stgp`: benchmark, fit, predict, summarize and synthesize PM2.5 sensor data.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{BackendChoice, ProtocolChoice, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "stgp", version, about = "Spatio-temporal GP regression for air-quality sensor networks")]
struct Cli {
    /// TOML run configuration; built-in defaults (synthetic data) when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolChoice>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendChoice>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment matrix and write the comparison tables.
    Benchmark,
    /// Train one model on all data and save it.
    Fit {
        /// Output model file (default: <out-dir>/model.json).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Predict at the rows of a query CSV with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with latitude, longitude, timestamp (and weather columns if
        /// the model uses them).
        #[arg(long)]
        query: PathBuf,
        /// Output CSV (default: <out-dir>/predictions.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Hour-of-day box-plot statistics and hourly means.
    Stats {
        /// Sensor CSV, overriding the config.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write a synthetic sensor network with its latent truth.
    Synth,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = cli.out_dir {
        cfg.out_dir = d;
    }
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(p) = cli.protocol {
        cfg.protocol = p;
    }
    if let Command::Stats { data: Some(d) } = &cli.command {
        cfg.data.sensors = Some(d.clone());
    }
    cfg.validate()?;
    match cli.command {
        Command::Benchmark => commands::benchmark(&cfg, cli.backend),
        Command::Fit { model } => commands::fit(&cfg, cli.backend, model).map(|_| ()),
        Command::Predict { model, query, output } => commands::predict(&cfg, &model, &query, output).map(|_| ()),
        Command::Stats { .. } => commands::stats(&cfg),
        Command::Synth => commands::synth(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
