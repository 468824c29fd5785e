//! Command-line surface of the imputation toolkit.
//!
//! `sesa impute | evaluate | discover | simulate`; see `sesa --help`.
//! Every JSON artifact carries the tool version, the fully resolved
//! [`RunConfig`] and the seed, and can itself be passed back as `--config`
//! to reproduce the run.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{cmd_discover, cmd_evaluate, cmd_impute, cmd_simulate};
pub use config::{Method, Overrides, ReportFormat, RunConfig};
pub use error::CliError;

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "SESA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sesa", version, about = "SEM/FIML + self-attention imputation toolkit")]
pub struct Cli {
    /// JSON config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill missing cells.
    Impute(commands::ImputeArgs),
    /// Mask complete data, impute, score against the truth.
    Evaluate(commands::EvaluateArgs),
    /// Learn a DAG with NOTEARS and optionally suggest a path model.
    Discover(commands::DiscoverArgs),
    /// Write an MCAR-masked copy of complete data plus its mask.
    Simulate(commands::SimulateArgs),
}

impl Command {
    fn flags(&self) -> &Overrides {
        match self {
            Command::Impute(a) => &a.flags,
            Command::Evaluate(a) => &a.flags,
            Command::Discover(a) => &a.flags,
            Command::Simulate(a) => &a.flags,
        }
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    if let Some(n) = cli.threads {
        // Only fails when a pool already exists, e.g. when called twice
        // from one process; the existing pool is then kept.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("thread pool already initialized");
        }
    }
    let cfg = match config::resolve(cli.config.as_deref(), cli.command.flags()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match &cli.command {
        Command::Impute(a) => cmd_impute(a, &cfg),
        Command::Evaluate(a) => cmd_evaluate(a, &cfg),
        Command::Discover(a) => cmd_discover(a, &cfg),
        Command::Simulate(a) => cmd_simulate(a, &cfg),
    }
}
