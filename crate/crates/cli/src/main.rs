mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{cmd_baseline, cmd_bench, cmd_metric, cmd_plan, print_json, Output};
use config::RunConfig;
use error::{CliError, CliResult};

/// Coverage trajectory planning by flow matching.
#[derive(Parser, Debug)]
#[command(name = "covflow", version)]
struct Cli {
    /// Run configuration (flat TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for all cores. Falls back to COVFLOW_WORKERS.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Also write time_vs_horizon.svg (bench).
    #[arg(long, global = true)]
    plot: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan a coverage trajectory.
    Plan,
    /// Tour-and-track baseline on the same task.
    BaselineTsp,
    /// Timing sweep over horizons.
    Bench,
    /// Score a trajectory CSV against the configured reference.
    Metric {
        trajectory: PathBuf,
    },
}

fn env_workers() -> CliResult<Option<usize>> {
    match std::env::var("COVFLOW_WORKERS") {
        Err(_) => Ok(None),
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            CliError::usage("config", format!("COVFLOW_WORKERS must be a nonnegative integer, got {v:?}"))
        }),
    }
}

fn run(cli: Cli) -> CliResult<serde_json::Value> {
    let Some(path) = &cli.config else {
        return Err(CliError::usage("usage", "--config is required"));
    };
    let mut cfg = RunConfig::load(path)?;
    let workers = match cli.workers {
        Some(w) => Some(w),
        None => env_workers()?,
    };
    cfg.override_with(cli.seed, workers);
    let out = Output {
        dir: cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(".")),
        force: cli.force,
    };
    match &cli.command {
        Command::Plan => cmd_plan(&cfg, &out),
        Command::BaselineTsp => cmd_baseline(&cfg, &out),
        Command::Bench => cmd_bench(&cfg, &out, cli.plot),
        Command::Metric { trajectory } => cmd_metric(&cfg, trajectory),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage("usage", e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.code as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            print_json(&summary);
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.code as u8)
        }
    }
}
