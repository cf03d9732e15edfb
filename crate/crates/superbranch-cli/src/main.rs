//! Command-line front end: configuration ingestion, experiment
//! orchestration, and artifact emission.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "superbranch",
    about = "Simulate non-local branching particle systems and solve their limiting cumulant/moment equations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    /// Configuration file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override [experiment].master_seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override [experiment].replicates
    #[arg(long)]
    replicates: Option<u32>,
    /// Override [experiment].k (repeatable)
    #[arg(long)]
    k: Vec<u64>,
    /// Output directory for emitted files
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override [solver].method (rk4-ode | picard-mild)
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicates and write per-snapshot functionals
    Simulate(RunArgs),
    /// Solve the limiting equations and write the field grid
    Solve(RunArgs),
    /// Run replicates and compare against the solver reference
    Compare(RunArgs),
    /// First-moment semigroups and the excessive-bound gap
    Moments(RunArgs),
    /// List the model registry and parameter schemas
    Zoo,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_TRUNCATED: u8 = 3;

fn dispatch(
    args: &RunArgs,
    f: impl Fn(&config::LoadedConfig, &std::path::Path) -> anyhow::Result<run::Outcome>,
) -> ExitCode {
    let overrides = config::Overrides {
        seed: args.seed,
        replicates: args.replicates,
        k: args.k.clone(),
        method: args.method.clone(),
    };
    let cfg = match config::load(&args.config, &overrides) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("configuration error: {err:#}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    if let Err(err) = std::fs::create_dir_all(&args.out) {
        eprintln!(
            "cannot create output directory {}: {err}",
            args.out.display()
        );
        return ExitCode::FAILURE;
    }
    match f(&cfg, &args.out) {
        Ok(outcome) if outcome.truncated > 0 => {
            eprintln!(
                "warning: {} replicate(s) truncated by guards; partial outputs flagged in summary.json",
                outcome.truncated
            );
            ExitCode::from(EXIT_TRUNCATED)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(args) => dispatch(&args, run::simulate_cmd),
        Command::Solve(args) => dispatch(&args, run::solve_cmd),
        Command::Compare(args) => dispatch(&args, run::compare_cmd),
        Command::Moments(args) => dispatch(&args, run::moments_cmd),
        Command::Zoo => {
            print!("{}", run::zoo_listing());
            ExitCode::SUCCESS
        }
    }
}
