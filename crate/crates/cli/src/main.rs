//! `pln`: fit Poisson-lognormal models, report coefficient confidence
//! intervals and run simulation studies.
//!
//! Exit codes: 0 success, 1 error (including usage errors), 2 the fit hit its
//! iteration cap before converging (the result is still written).

mod artifact;
mod commands;
mod io;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "pln", version, about = "Poisson-lognormal regression with sandwich confidence intervals")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, value_parser = positive)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the model by variational EM and write a JSON fit artifact.
    Fit(FitArgs),
    /// Compute Fisher and/or sandwich confidence intervals from a fit.
    Variance(VarianceArgs),
    /// Draw a simulation scenario and one dataset from it.
    Simulate(SimulateArgs),
    /// Run the replicated coverage experiment and write a JSON report.
    Coverage(CoverageArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Counts CSV (n rows, p columns, one header row).
    #[arg(long)]
    counts: PathBuf,
    /// Covariates CSV (n rows, m columns).
    #[arg(long)]
    covariates: PathBuf,
    /// Offsets CSV (n rows, p columns); zero when omitted.
    #[arg(long)]
    offsets: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Relative ELBO change that ends the outer loop.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Start from the estimates in an earlier fit artifact.
    #[arg(long)]
    warm_start: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Fisher,
    Sandwich,
    Both,
}

#[derive(Args, Debug)]
struct VarianceArgs {
    /// Fit artifact written by `pln fit`.
    #[arg(long)]
    fit: PathBuf,
    /// Counts CSV; defaults to the file recorded in the fit manifest.
    #[arg(long, requires = "covariates")]
    counts: Option<PathBuf>,
    #[arg(long, requires = "counts")]
    covariates: Option<PathBuf>,
    #[arg(long, requires = "counts")]
    offsets: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MethodArg::Sandwich)]
    method: MethodArg,
    #[arg(long, default_value_t = 0.95, value_parser = level)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    #[arg(long, value_parser = positive)]
    n: usize,
    #[arg(long, value_parser = positive)]
    p: usize,
    #[arg(long, value_parser = positive)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed Toeplitz correlation; drawn uniformly from [0.8, 0.95] when omitted.
    #[arg(long)]
    rho: Option<f64>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Directory receiving B_star.csv, Sigma_star.csv, X.csv and Y.csv.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct CoverageArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 100, value_parser = positive)]
    replicates: usize,
    #[arg(long, default_value_t = 0.95, value_parser = level)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("expected a positive integer, got {s:?}")),
    }
}

fn level(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("expected a level in (0, 1), got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot configure {threads} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let outcome = match cli.command {
        Command::Fit(args) => commands::fit(args),
        Command::Variance(args) => commands::variance(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::Coverage(args) => commands::coverage(args),
    };
    match outcome {
        Ok(commands::Status::Done) => ExitCode::SUCCESS,
        Ok(commands::Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
