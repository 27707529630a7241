//! Command line front end for the obstacle-problem solver.
//!
//! Three subcommands share one instance description (a .cfg file in TOML
//! syntax):
//!
//! - `parvi solve heat.cfg` marches the scheme and writes `solution.csv`
//!   plus `report.json`; repeat `--route` to cross-check several solvers.
//! - `parvi verify heat.cfg --checks complementarity,dominance` solves and
//!   then runs a posteriori checks, exiting 2 if any of them fails.
//! - `parvi sweep heat.cfg --refine 3` re-solves on refined grids and
//!   tabulates how the solution settles.
//!
//! Exit codes: 0 success, 2 invalid input or failed verification,
//! 3 solver non-convergence, 4 i/o failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Lib(#[from] parvi::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::Lib(e) => match e {
                parvi::Error::NonConvergence(_) | parvi::Error::SingularSystem(_) => 3,
                _ => 2,
            },
        }
    }
}

#[derive(Parser)]
#[command(
    name = "parvi",
    version,
    about = "Finite-difference solver for parabolic Bellman obstacle problems"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the configured instance and write the solution table.
    Solve {
        /// Instance description (.cfg, TOML syntax).
        config: PathBuf,
        /// Directory for output files; defaults to output.directory from
        /// the config, else the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
        /// Solver route (direct, penalized, incremental); repeat to compare.
        #[arg(long = "route")]
        routes: Vec<String>,
        /// Override the solve tolerance from the config.
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Solve, then run a posteriori checks on the result.
    Verify {
        /// Instance description (.cfg, TOML syntax).
        config: PathBuf,
        /// Directory for output files; defaults to output.directory from
        /// the config, else the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
        /// Solver route for the solution under test.
        #[arg(long)]
        route: Option<String>,
        /// Override the solve tolerance from the config.
        #[arg(long)]
        tol: Option<f64>,
        /// Seed for the randomized comparison check.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated checks to run. Defaults to the config list,
        /// or to every known check.
        #[arg(long = "checks", value_delimiter = ',')]
        checks: Vec<String>,
    },
    /// Re-solve on a ladder of refined grids and tabulate settling.
    Sweep {
        /// Instance description (.cfg, TOML syntax).
        config: PathBuf,
        /// Directory for output files; defaults to output.directory from
        /// the config, else the current directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
        /// Number of refinement stages beyond the configured grid.
        #[arg(long, default_value_t = 2)]
        refine: usize,
        /// Nodes-per-cell multiplier between stages.
        #[arg(long, default_value_t = 2)]
        factor: usize,
        /// Override the solve tolerance from the config.
        #[arg(long)]
        tol: Option<f64>,
    },
}

/// --out wins; otherwise output.directory (relative to the config file),
/// otherwise the current directory.
fn resolve_out(flag: Option<PathBuf>, cfg: &config::Config, config_dir: &std::path::Path) -> PathBuf {
    if let Some(out) = flag {
        return out;
    }
    match &cfg.output.directory {
        Some(dir) if dir.is_absolute() => dir.clone(),
        Some(dir) => config_dir.join(dir),
        None => PathBuf::from("."),
    }
}

fn init_threads() {
    if let Ok(raw) = std::env::var("PARVI_THREADS") {
        if let Ok(n) = raw.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<u8, CliError> {
    match cmd {
        Cmd::Solve { config, out, force, routes, tol } => {
            let cfg = config::load_config(&config)?;
            let dir = config.parent().map(PathBuf::from).unwrap_or_default();
            let out = resolve_out(out, &cfg, &dir);
            commands::run_solve(&cfg, &dir, &out, force, &routes, tol)
        }
        Cmd::Verify { config, out, force, route, tol, seed, checks } => {
            let cfg = config::load_config(&config)?;
            let dir = config.parent().map(PathBuf::from).unwrap_or_default();
            let out = resolve_out(out, &cfg, &dir);
            commands::run_verify(&cfg, &dir, &out, force, route.as_deref(), tol, seed, &checks)
        }
        Cmd::Sweep { config, out, force, refine, factor, tol } => {
            let cfg = config::load_config(&config)?;
            let dir = config.parent().map(PathBuf::from).unwrap_or_default();
            let out = resolve_out(out, &cfg, &dir);
            commands::run_sweep(&cfg, &dir, &out, force, refine, factor, tol)
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("parvi: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
