//! Experiment driver: resolves a manifest plus command-line overrides into an
//! [`Experiment`] and runs the report, trace and simulation commands on it.
//!
//! Commands are pure functions of the experiment and return their output
//! files in memory; `main` only writes them out.

mod commands;
mod manifest;

pub use commands::{
    cmd_quantize_report, cmd_sensitivity, cmd_simulate, cmd_sweep, cmd_tracegen, OutputFile, SweepAxis,
};
pub use manifest::{Experiment, GeneratorOverrides, Manifest, OutputFormat, Overrides, PrecisionPolicy, TraceSource};

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_IO: i32 = 1;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Format(_) => EXIT_FORMAT,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<sqdm::Error> for CliError {
    fn from(e: sqdm::Error) -> Self {
        match e {
            sqdm::Error::Format { .. } => CliError::Format(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
