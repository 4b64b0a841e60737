//! `gsvsr` — selective-scan video super-resolution workbench.
//!
//! One binary fronts the library crate: synthetic dataset generation,
//! the numerical invariant suites, training, inference, the propagation
//! ablation study, and the scan-vs-attention scaling benchmark. Every
//! run resolves its configuration (defaults < `--config` file < `--set`
//! pairs < dedicated flags), snapshots it into the output directory, and
//! writes artifacts only there.
//!
//! Exit codes: 0 on success, 1 for failed validation or assertions, 2
//! for I/O trouble.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gsvsr_core::{Error, Result};

use crate::config::Settings;

/// Gather-scatter video super-resolution workbench.
#[derive(Parser)]
#[command(name = "gsvsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat key=value configuration file (`#` starts a comment line).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Directory every artifact is written into.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Shorthand for `--set seed=N`; wins over file and --set values.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// One `key=value` override; repeatable, later pairs win.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Shorthand for `--set preset=NAME` (model family for training).
    #[arg(long, global = true, value_name = "toy|full")]
    preset: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Render the synthetic clip corpus with exact ground-truth flows.
    Gen,
    /// Run the numerical invariant suites and report every check.
    Check,
    /// Train a model on a generated dataset.
    Train,
    /// Upscale one clip with a trained checkpoint.
    Sr,
    /// Train the propagation variants on one benchmark and rank them.
    Ablate,
    /// Time the scans against full attention over a length sweep.
    Bench,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Check => "check",
            Command::Train => "train",
            Command::Sr => "sr",
            Command::Ablate => "ablate",
            Command::Bench => "bench",
        }
    }
}

fn resolve(cli: &Cli) -> Result<Settings> {
    let mut settings = Settings::new();
    if let Some(path) = &cli.config {
        settings.load_file(path)?;
    }
    for pair in &cli.overrides {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set {pair:?}: expected KEY=VALUE")))?;
        settings.apply(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        settings.apply("seed", &seed.to_string())?;
    }
    if let Some(preset) = &cli.preset {
        settings.apply("preset", preset)?;
    }
    Ok(settings)
}

fn run(cli: &Cli) -> Result<()> {
    let settings = resolve(cli)?;
    let snapshot = settings.snapshot(cli.command.name())?;
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("config.resolved"), snapshot)?;
    match cli.command {
        Command::Gen => commands::gen(&settings, &cli.out),
        Command::Check => commands::check(&settings, &cli.out),
        Command::Train => commands::train_cmd(&settings, &cli.out),
        Command::Sr => commands::sr(&settings, &cli.out),
        Command::Ablate => commands::ablate(&settings, &cli.out),
        Command::Bench => commands::bench(&settings, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) => 2,
                _ => 1,
            })
        }
    }
}
