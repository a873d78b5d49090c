//! `ampc` — robust adaptive MPC experiments from a config file.
//!
//! Exit codes: 0 ok, 1 configuration error, 2 persistence-of-excitation
//! failure, 3 estimator inconsistency, 4 synthesis failure, 5 controller
//! fault.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_estimate, cmd_predict, cmd_run, cmd_synthesize, CommandError};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "ampc", about = "Robust adaptive interval-predictor MPC toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop excitation run: least-squares estimate and confidence box.
    Estimate(CommonArgs),
    /// Interval predictors against the true trajectory.
    Predict(CommonArgs),
    /// Gain synthesis and certificate verification.
    Synthesize(CommonArgs),
    /// Full closed-loop receding-horizon experiment.
    Run(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (defaults to the config's [output].dir or "out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Emit SVG plots where the command supports them.
    #[arg(long)]
    plot: bool,
}

fn execute(command: &Command) -> Result<String, CommandError> {
    let args = match command {
        Command::Estimate(a) | Command::Predict(a) | Command::Synthesize(a) | Command::Run(a) => a,
    };
    let cfg = ExperimentConfig::load(&args.config)?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&out_dir).map_err(|source| CommandError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let plot = args.plot || cfg.output.plot;
    let output = match command {
        Command::Estimate(_) => cmd_estimate(&cfg, &out_dir, seed)?,
        Command::Predict(_) => cmd_predict(&cfg, &out_dir, seed, plot)?,
        Command::Synthesize(_) => cmd_synthesize(&cfg, &out_dir, seed)?,
        Command::Run(_) => cmd_run(&cfg, &out_dir, seed, plot)?,
    };
    let mut text = output.summary;
    for f in output.files {
        text.push_str(&format!("wrote {}\n", f.display()));
    }
    Ok(text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
