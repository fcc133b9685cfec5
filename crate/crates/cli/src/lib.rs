//! Command-line driver: scenario in, CSV fields and a JSON report out.

mod commands;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use output::scenario_hash;

/// Exit code of a run that completed without flags.
pub const EXIT_OK: i32 = 0;
/// Exit code of a run that completed with at least one flag raised.
pub const EXIT_FLAGGED: i32 = 1;
/// Exit code of a failed run or a usage error.
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "popctrl", version, about = "Simulation and null-control synthesis for a two-sex age-structured population")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Overrides grid.target_h of the scenario.
    #[arg(long = "grid-h", global = true)]
    pub grid_h: Option<f64>,
    /// Overrides output.directory of the scenario.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppresses console output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the scenario against the model hypotheses.
    Validate { scenario: PathBuf },
    /// Uncontrolled nonlinear forward solve.
    Simulate { scenario: PathBuf },
    /// Adjoint solve for the scenario's terminal data.
    Adjoint { scenario: PathBuf },
    /// Penalty schedule on a frozen fertility trace.
    Control { scenario: PathBuf },
    /// Fixed-point iteration with the nonlinear fertility coupling.
    Solve { scenario: PathBuf },
    /// Weighted-metric contraction test of the well-posedness map.
    Contraction { scenario: PathBuf },
    /// Observability constant estimates, optionally over a geometry sweep.
    Observability { scenario: PathBuf },
    /// Terminal norms across a list of penalty weights.
    Sweep { scenario: PathBuf },
}

/// Caps the rayon pool at POPCTRL_THREADS when set.
fn configure_threads() {
    if let Some(n) = std::env::var("POPCTRL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        // a pool built earlier in the process keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match commands::run(&cli) {
        Ok(report) => {
            if report.is_flagged() {
                EXIT_FLAGGED
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}
