//! Library side of the `mutan` command: parameter audits, check suites,
//! planted-task sweeps and the subcommand implementations.

pub mod args;
pub mod checks;
pub mod commands;
pub mod experiments;
pub mod params;

use std::fmt;

/// Exit status of a command that ran to completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A check or verification exceeded its tolerance.
    ToleranceBreach,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Success => 0,
            Outcome::ToleranceBreach => 1,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Numerical failure while running (exit 1).
    Failed(String),
    /// Bad flags or flags inconsistent with the input files (exit 2).
    Usage(String),
    /// Unreadable, unwritable or corrupt files (exit 3).
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) => write!(f, "error: {m}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}
