//! Command implementations behind the `jmvae` binary: run-config parsing,
//! dataset selectors, PGM image I/O, and the train / eval / generate /
//! latent-dump entry points.
//!
//! Exit-code contract: 0 success, 1 runtime failure, 2 usage or
//! configuration error. Every command validates its inputs before writing
//! anything, and writes only under its output directory.

pub mod commands;
pub mod config;
pub mod pgm;
pub mod selector;

use std::fmt;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad usage, configuration, or validation failure (exit 2).
    Usage(String),
    /// Failure during the actual work (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}
