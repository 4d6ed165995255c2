//! Library side of the `cso` binary: configuration files, the run pipeline
//! and the other subcommands, usable from tests without spawning a process.

use std::fmt;

pub mod commands;
pub mod config;
pub mod run;

pub use config::{Instance, ProblemSource, RunConfig};
pub use run::{execute, RunOutcome, RunReport};

/// Process exit status of a subcommand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitStatus {
    Success = 0,
    Usage = 1,
    Numerical = 2,
    Verification = 3,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        self as u8
    }
}

/// An error together with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub status: ExitStatus,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            status: ExitStatus::Usage,
            error: error.into(),
        }
    }

    pub fn numerical(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            status: ExitStatus::Numerical,
            error: error.into(),
        }
    }

    pub fn verification(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            status: ExitStatus::Verification,
            error: error.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;
