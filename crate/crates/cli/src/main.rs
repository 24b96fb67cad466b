//! `mveq`: solve, verify and simulate multi-period mean-variance equilibria.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid input, 3 the requested
//! equilibrium does not exist, 4 a verification or reproduction check failed.

// `!(x > 0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod reference;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mveq::market::MarketError;
use mveq::oracle::OracleError;
use mveq::SolveError;

#[derive(Debug, Parser)]
#[command(name = "mveq", version, about = "Multi-period mean-variance equilibrium solutions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Open-loop equilibrium control.
    SolveOpenLoop(SolveArgs),
    /// Feedback equilibrium strategy.
    SolveFeedback(SolveArgs),
    /// Mixed equilibrium solution for a given pure-feedback part Φ.
    SolveMixed(MixedArgs),
    /// Check a solver's policy against every single-stage deviation on a
    /// moment-matched scenario tree.
    Verify(VerifyArgs),
    /// Monte Carlo estimate of terminal-wealth moments and cost.
    Simulate(SimulateArgs),
    /// Solve the built-in example with all three solvers and compare with the
    /// reference tables to four decimals.
    ReproduceExample(ReproduceArgs),
    /// Mixed solutions for a batch of sampled Φ; one CSV row per draw.
    Batch(BatchArgs),
}

#[derive(Debug, Clone, Args)]
struct CommonArgs {
    /// Market file (JSON) or built-in preset name.
    #[arg(long, default_value = mveq::EXAMPLE_PRESET)]
    market: String,
    /// Initial stage t (overrides the market file).
    #[arg(long)]
    t: Option<usize>,
    /// Initial wealth x (overrides the market file).
    #[arg(long)]
    x: Option<f64>,
    /// Relative residual tolerance for range and solvability checks.
    #[arg(long)]
    tol_range: Option<f64>,
    /// Relative eigenvalue tolerance for PSD checks.
    #[arg(long)]
    tol_psd: Option<f64>,
    /// Relative singular-value cutoff for pseudoinverses.
    #[arg(long)]
    tol_pinv: Option<f64>,
    /// Absolute threshold below which a scalar is treated as zero by the dagger.
    #[arg(long)]
    tol_dagger: Option<f64>,
    #[arg(long, value_enum, default_value_t = Format::Pretty)]
    format: Format,
    /// Write the primary output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Also write the full recursion trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct PhiArgs {
    /// Pure-feedback part: JSON file with N arrays of m numbers, `sample`
    /// (standard normal, seeded by --seed) or `zero`.
    #[arg(long, default_value = "sample")]
    phi: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Args)]
struct MixedArgs {
    #[command(flatten)]
    solve: SolveArgs,
    #[command(flatten)]
    phi: PhiArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Solver {
    OpenLoop,
    Feedback,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Distribution {
    Gaussian,
    Tree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Pretty,
    Csv,
    Json,
}

#[derive(Debug, Clone, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value_t = Solver::OpenLoop)]
    solver: Solver,
    /// Deviation semantics; defaults to the solver's own.
    #[arg(long, value_enum)]
    semantics: Option<Solver>,
    /// Atoms per stage of the moment-matched tree.
    #[arg(long)]
    atoms: Option<usize>,
    /// Relative tolerance on deviation gaps.
    #[arg(long, default_value_t = 1e-7)]
    tol_verify: f64,
    #[command(flatten)]
    phi: PhiArgs,
}

#[derive(Debug, Clone, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value_t = Solver::OpenLoop)]
    solver: Solver,
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, value_enum, default_value_t = Distribution::Gaussian)]
    distribution: Distribution,
    /// Atoms per stage when sampling from a moment-matched tree.
    #[arg(long)]
    atoms: Option<usize>,
    #[command(flatten)]
    phi: PhiArgs,
}

#[derive(Debug, Clone, Args)]
struct ReproduceArgs {
    /// Write the tables here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
struct BatchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, default_value_t = 10)]
    draws: usize,
    /// Draw `i` samples Φ with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub(crate) enum CliError {
    Validation(String),
    Nonexistence(String),
    CheckFailed(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Nonexistence(_) => 3,
            CliError::CheckFailed(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m)
            | CliError::Nonexistence(m)
            | CliError::CheckFailed(m)
            | CliError::Internal(m) => m,
        }
    }
}

impl From<MarketError> for CliError {
    fn from(e: MarketError) -> Self {
        match e {
            MarketError::Io(_)
            | MarketError::Parse(_)
            | MarketError::Validation { .. }
            | MarketError::UnknownPreset(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SolveError> for CliError {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::Nonexistence(_) => CliError::Nonexistence(e.to_string()),
            SolveError::InvalidInput(_) | SolveError::Market(_) => CliError::Validation(e.to_string()),
            SolveError::Internal { .. } | SolveError::Numerics(_) => CliError::Internal(e.to_string()),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::NonConvex { .. } => CliError::CheckFailed(e.to_string()),
            OracleError::Numerics(_) => CliError::Internal(e.to_string()),
            OracleError::InfeasibleTree { .. }
            | OracleError::InvalidTree(_)
            | OracleError::TooManyLeaves { .. }
            | OracleError::Invalid(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(format!("output: {e}"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MV_EQ_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::SolveOpenLoop(args) => commands::solve_open_loop(&args),
        Command::SolveFeedback(args) => commands::solve_feedback(&args),
        Command::SolveMixed(args) => commands::solve_mixed(&args),
        Command::Verify(args) => commands::verify(&args),
        Command::Simulate(args) => commands::simulate(&args),
        Command::ReproduceExample(args) => commands::reproduce_example(&args),
        Command::Batch(args) => commands::batch(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
