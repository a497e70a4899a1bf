mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "epitoken", version, about = "Spatio-temporal epidemic forecasting with a prompted token backbone")]
struct Cli {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to runs/<timestamp>-seed<seed>.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model checkpoint stem (without .bin/.json); defaults to <out>/model.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a metapopulation SIR outbreak and write its CSV files.
    Synth,
    /// Train a model and save its checkpoint.
    Train,
    /// Roll a trained model forward over the horizon.
    Forecast {
        /// Number of context days; the start of the test range by default.
        #[arg(long)]
        context_end: Option<usize>,
    },
    /// Score a trained model and the baselines on the test range.
    Evaluate,
    /// Train and score every configured variant.
    Ablate,
    /// Merge report.json files from earlier runs.
    Report {
        #[arg(required = true)]
        sources: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Forecast { .. } => "forecast",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Report { .. } => "report",
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(ckpt) = &cli.checkpoint {
        cfg.checkpoint = Some(ckpt.clone());
    }
    if cfg.out_dir.is_none() {
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
        cfg.out_dir = Some(PathBuf::from("runs").join(format!("{stamp}-seed{}", cfg.seed)));
    }
    cfg.resolve()
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli)?;
    let mut run = Run::start(cfg, cli.command.name())?;
    match &cli.command {
        Command::Synth => commands::synth(&mut run),
        Command::Train => commands::train_cmd(&mut run),
        Command::Forecast { context_end } => commands::forecast_cmd(&mut run, *context_end),
        Command::Evaluate => commands::evaluate(&mut run),
        Command::Ablate => commands::ablate(&mut run),
        Command::Report { sources } => commands::report(&mut run, sources),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(hint) = e.hint() {
                eprintln!("hint: {hint}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
