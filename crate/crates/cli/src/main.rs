//! `rcm-lab`: generate environments, compute intrinsic metrics and heat
//! kernels, and run the acceptance suite from JSON experiment configs.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Outputs;
use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rcm-lab", version, about = "Random conductance model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the environment seed (and any seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the solver tolerance.
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Worker threads; 0 or unset uses all cores.
    #[arg(long, global = true, env = "RCM_LAB_THREADS")]
    threads: Option<usize>,

    /// Output directory; overrides `out_dir` in the config.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    error_json: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate an environment: environment.csv + environment.json.
    Gen,
    /// Intrinsic distances and lower-bound report.
    Dist,
    /// Heat kernel from the source vertex, with optional envelope fit.
    Hke,
    /// Greedy paths and records of the running maximum.
    Optimality,
    /// Run the acceptance suite.
    Verify,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_overrides(cli.seed, cli.tol);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    if let Command::Verify = cli.command {
        let out = cli.out_dir.as_deref().map(Outputs::new).transpose()?;
        return commands::verify(out.as_ref());
    }
    let cfg = load_config(cli)?;
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let out = Outputs::new(&dir)?;
    match cli.command {
        Command::Gen => commands::gen(&cfg, &out),
        Command::Dist => commands::dist(&cfg, &out),
        Command::Hke => commands::hke(&cfg, &out),
        Command::Optimality => commands::optimality(&cfg, &out),
        Command::Verify => unreachable!(),
    }
}

fn report(err: &CliError, json: bool) -> ExitCode {
    if json {
        eprintln!("{}", err.to_json());
    } else {
        eprintln!("error: {err}");
    }
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let json = std::env::args().any(|a| a == "--error-json");
            if json && e.use_stderr() {
                return report(&CliError::Usage(e.kind().to_string()), true);
            }
            e.exit();
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e, cli.error_json),
    }
}
