//! `bisgml`: build tables, score records, train and evaluate imputation models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Config;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "bisgml",
    version,
    about = "Race/ethnicity imputation from surnames, given names and Census blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Multiplier on sample sizes (synth records, tuning and training rows).
    #[arg(long, global = true)]
    scale: Option<f64>,

    /// Top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Feature layout: base or extended (comma list for loso).
    #[arg(long, global = true)]
    layout: Option<String>,

    /// Method or model family (comma list for loso and evaluate).
    #[arg(long, global = true)]
    method: Option<String>,

    /// Tract aggregation: prob or argmax.
    #[arg(long, global = true)]
    agg: Option<String>,

    /// Output directory; must be new or empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build surname, block and given-name tables plus a manifest.
    BuildTables,
    /// Score a person file with BISG, extended BISG or a trained model.
    Predict,
    /// Train one model on labelled records.
    Train,
    /// Cross-validated Latin hypercube search over hyperparameters.
    Tune,
    /// Metrics of prediction files against self-reported labels.
    Evaluate,
    /// Leave-one-state-out experiment with comparison tables.
    Loso,
    /// Generate a synthetic multi-state corpus.
    Synth,
}

fn build_config(cli: &Cli) -> Result<Config, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let overrides = [
        ("run.scale", cli.scale.map(|v| v.to_string())),
        ("run.seed", cli.seed.map(|v| v.to_string())),
        ("run.layout", cli.layout.clone()),
        ("run.method", cli.method.clone()),
        ("run.agg", cli.agg.clone()),
        (
            "run.out",
            cli.out.as_ref().map(|p| p.to_string_lossy().into_owned()),
        ),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set_from_cli(key, &v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    let threads: usize = cfg.value("run.threads")?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| bisgml_core::Error::Config(format!("run.threads: {e}")))?;
    }
    match cli.command {
        Command::BuildTables => commands::build_tables::run(&cfg),
        Command::Predict => commands::predict::run(&cfg),
        Command::Train => commands::train::run(&cfg),
        Command::Tune => commands::train::run_tune(&cfg),
        Command::Evaluate => commands::evaluate::run(&cfg),
        Command::Loso => commands::loso::run(&cfg),
        Command::Synth => commands::synth::run(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
