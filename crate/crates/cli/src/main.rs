//! `sepsis`: simulate, analyze and control the sepsis immune-response model.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
//! Failures print one JSON object on stderr.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use sepsis_core::Error;

use config::RunConfig;
use manifest::Run;

#[derive(Parser)]
#[command(name = "sepsis", version, about = "Sepsis immune-response model: simulation, bifurcation analysis and treatment control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration JSON (a manifest.json from an earlier run also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides the config's.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; output does not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Scenario preset (pathogen-high or tnf-persistent); overrides the config's.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Integrate a model and export the trajectory.
    Simulate,
    /// Sweep a parameter, classify equilibria and check for oscillations.
    Bifurcate,
    /// Receding-horizon control by improved BO and both baselines.
    Optimize,
    /// Build the sliding-window control dataset.
    GenerateData,
    /// Train the recurrent surrogate on a dataset.
    Train,
    /// Roll out a trained surrogate on held-out settings.
    Predict,
    /// With/without-control comparison on several presets.
    Compare,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Bifurcate => "bifurcate",
            Command::Optimize => "optimize",
            Command::GenerateData => "generate-data",
            Command::Train => "train",
            Command::Predict => "predict",
            Command::Compare => "compare",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(p) = &cli.preset {
        cfg.preset = p.clone();
    }
    cfg.finalize()
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let mut run = Run::new(cli.command.name(), &cli.out, &cfg)?;
    let result = match cli.command {
        Command::Simulate => commands::simulate(&cfg, &mut run),
        Command::Bifurcate => commands::bifurcate(&cfg, &mut run),
        Command::Optimize => commands::optimize(&cfg, &mut run),
        Command::GenerateData => commands::generate_data(&cfg, &mut run),
        Command::Train => commands::train(&cfg, &mut run),
        Command::Predict => commands::predict(&cfg, &mut run),
        Command::Compare => commands::compare(&cfg, &mut run),
    };
    // The manifest lists whatever was written, also after a failure.
    run.finish()?;
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match &e {
                Error::Numeric(_) => ("numeric", 3),
                Error::Domain(_) => ("domain", 2),
                Error::Config(_) => ("config", 2),
                Error::Io(_) => ("io", 2),
                Error::Json(_) => ("json", 2),
            };
            eprintln!("{}", json!({ "error": { "kind": kind, "message": e.to_string(), "command": cli.command.name() } }));
            ExitCode::from(code)
        }
    }
}
