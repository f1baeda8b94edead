//! Command-line orchestration for `icu-extract`: synthetic data generation,
//! extraction to the four output tables, sample preparation, baseline
//! evaluation and cohort reports.

pub mod args;
pub mod commands;
pub mod digest;
pub mod error;
pub mod manifest;

pub use args::{Cli, Command};
pub use error::{CliError, ErrorKind};
pub use manifest::RunManifest;

/// Runs a parsed command line, on a dedicated pool when `--threads` is given.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::config("threads", e))?;
            pool.install(|| commands::dispatch(cli.command))
        }
        None => commands::dispatch(cli.command),
    }
}
