//! `mfglab` experiment driver.
//!
//! Exit codes: 0 success, 2 invalid config or failed validation,
//! 3 non-convergence, 4 I/O failure.

mod commands;
mod config;
mod error;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Context;
use crate::config::{ExperimentConfig, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mfglab", version, about = "Constrained linear-quadratic mean-field game experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every random stream; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root; overrides MFGLAB_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for the parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Monte Carlo paths of the solver.
    #[arg(long, global = true)]
    paths: Option<usize>,

    /// Population size for the `population` subcommand.
    #[arg(long, global = true)]
    agents: Option<usize>,

    /// Time steps K.
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the standing assumptions and print the report.
    Validate,
    /// Solve the mean-field fixed point and write z_star.csv, the policy and a manifest.
    Solve,
    /// Write the Riccati reference and, for scalar constrained models, the DP value table.
    Oracle {
        /// Prior solve run supplying the frozen mean path.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Simulate one finite population under the equilibrium controls.
    Population {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Convergence rates of the finite population towards the limit.
    Rates {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Unilateral deviation gaps over the built-in family.
    Nash {
        #[arg(long)]
        from: Option<PathBuf>,
    },
}

fn load(cli: &Cli, from: Option<PathBuf>) -> CliResult<Context> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut config = ExperimentConfig::parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })?;
    config.apply(Overrides {
        seed: cli.seed,
        paths: cli.paths,
        agents: cli.agents,
        steps: cli.steps,
    });
    let root = run::output_root(cli.out.as_deref(), config.output.as_deref());
    Ok(Context {
        config,
        file_sha256: run::sha256_hex(&bytes),
        root,
        from,
    })
}

fn execute(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads {threads}: {e}")))?;
    }
    let from = match &cli.command {
        Command::Oracle { from } | Command::Population { from } | Command::Rates { from } | Command::Nash { from } => {
            from.clone()
        }
        Command::Validate | Command::Solve => None,
    };
    let ctx = load(&cli, from)?;
    match cli.command {
        Command::Validate => commands::validate(&ctx),
        Command::Solve => commands::solve(&ctx).map(drop),
        Command::Oracle { .. } => commands::oracle(&ctx).map(drop),
        Command::Population { .. } => commands::population(&ctx).map(drop),
        Command::Rates { .. } => commands::rates(&ctx).map(drop),
        Command::Nash { .. } => commands::nash(&ctx).map(drop),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
