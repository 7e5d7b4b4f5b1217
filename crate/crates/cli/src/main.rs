//! `rgd`: solve, sweep, evaluate and check robust dispatch cases.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "rgd", version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("RGD_GIT_DESCRIBE"), ")"))]
#[command(about = "Robust generation dispatch with purchased predictions")]
pub struct Cli {
    /// Log each C&CG iteration to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve one case and write the report, trace and plot series.
    Solve(SolveArgs),
    /// Re-solve a case along a parameter grid, next to the no-purchase baseline.
    Sweep(SweepArgs),
    /// Monte Carlo evaluation of a solved dispatch.
    Oos(OosArgs),
    /// Validate a case and test the Chebyshev bounds on sample distributions.
    Check(CheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Mapping,
    Traditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FcArg {
    Peak,
    TotalSlack,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    /// Absolute stopping gap in dollars. Defaults to max(1, 1e-4 |UB|).
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub iter_cap: usize,
    /// Solver random seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feasibility check used inside the loop.
    #[arg(long, value_enum, default_value_t = FcArg::Peak)]
    pub fc: FcArg,
    /// Keep wall times in the trace (makes output non-reproducible).
    #[arg(long)]
    pub timings: bool,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    pub case: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Mapping)]
    pub mode: ModeArg,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Output directory; created if missing.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    pub case: PathBuf,
    /// m, delta_xi or variance_multiplier.
    #[arg(long)]
    pub param: String,
    /// Comma list (`0,1e3,5e3`) or `start:stop:count`.
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct OosArgs {
    pub case: PathBuf,
    /// Report written by `rgd solve`.
    pub solution: PathBuf,
    /// uniform or gaussian.
    #[arg(long, default_value = "gaussian")]
    pub dist: String,
    /// Multiplier on the prior standard deviation.
    #[arg(long, default_value_t = 1.0)]
    pub mult: f64,
    #[arg(short = 'n', long = "scenarios", default_value_t = 10_000)]
    pub scenarios: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cost per MW of unavoidable imbalance. Infeasible scenarios are dropped when unset.
    #[arg(long)]
    pub penalty: Option<f64>,
    /// Label for the summary row; defaults to the report's mode.
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CheckArgs {
    pub case: PathBuf,
    /// Distributions to sample; repeat the flag for several. Defaults to the standard set.
    #[arg(long = "dist")]
    pub dists: Vec<String>,
    #[arg(long, default_value_t = 20_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the case's δ.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Override the case's ξ.
    #[arg(long)]
    pub xi: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = match &cli.command {
        Command::Solve(a) => commands::solve(a, &args),
        Command::Sweep(a) => commands::sweep(a, &args),
        Command::Oos(a) => commands::oos(a, &args),
        Command::Check(a) => commands::check(a),
    };
    match out {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
