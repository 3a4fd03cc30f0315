//! Batch runner: `check | ladder | verify | solve | simulate`.
//!
//! Exit codes: 0 pass, 1 check failure, 2 usage or config error, 3 numerical
//! abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Output, EXIT_CHECK_FAILED, EXIT_PASS, EXIT_USAGE};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mfc-approx", version, about = "Reproducible experiments for the mfc-approx library")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Assumption audits and the mollifier bounds.
    Check,
    /// Convergence ladders with CSV, JSON and plot data.
    Ladder,
    /// Verification probes aggregated into one verdict file.
    Verify,
    /// Solve the particle Bellman equation and save the grid.
    Solve,
    /// Simulate the controlled state under a constant action.
    Simulate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Check => "check",
            Command::Ladder => "ladder",
            Command::Verify => "verify",
            Command::Solve => "solve",
            Command::Simulate => "simulate",
        }
    }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError {
        code: EXIT_USAGE,
        message: "--config PATH is required".into(),
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    let seed = cfg.seed()?;
    let problem = cfg.problem_spec()?;
    cfg.measure(problem.dim())?;
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError {
                code: EXIT_USAGE,
                message: format!("--jobs: {e}"),
            })?;
    }
    let out = Output::new(&cli.out, cfg.digest(), cli.command.name())?;
    match cli.command {
        Command::Check => commands::cmd_check(&cfg, seed, &out),
        Command::Ladder => commands::cmd_ladder(&cfg, seed, &out),
        Command::Verify => commands::cmd_verify(&cfg, seed, &out),
        Command::Solve => commands::cmd_solve(&cfg, &out),
        Command::Simulate => commands::cmd_simulate(&cfg, seed, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::from(EXIT_PASS),
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
