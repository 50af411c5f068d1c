//! Command-line error type mapping failures to process exit codes.
//!
//! Exit code contract: `0` success, `1` usage errors (bad flags or
//! arguments), `2` invalid inputs (configs, data files, checkpoints,
//! shape mismatches), `3` numerical failures (divergence, failed
//! gradient checks).

use std::fmt;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// The command line itself is malformed.
    Usage(String),
    /// A config, file, or shape failed validation; the message names
    /// the offending input.
    Invalid(String),
    /// A numerical failure at runtime.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Invalid(m) => write!(f, "{m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<stbln_core::Error> for CliError {
    fn from(e: stbln_core::Error) -> Self {
        match e {
            stbln_core::Error::Numeric(m) => CliError::Numeric(m),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

/// Wraps an IO error with the path it concerns.
pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Invalid(format!("{}: {e}", path.display()))
}

pub type Result<T> = std::result::Result<T, CliError>;
