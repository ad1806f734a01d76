//! Command implementations behind the `atm` binary.

pub mod commands;
pub mod config;
pub mod records;
pub mod search;

use std::fmt;

pub use config::RunConfig;

/// Bad command-line usage (exit status 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Invalid or unresolvable run configuration.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Stable tag for an error, printed on the diagnostic stream.
pub fn error_category(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(a) = cause.downcast_ref::<atm_core::AtmError>() {
            return a.category();
        }
        if cause.downcast_ref::<UsageError>().is_some() {
            return "usage";
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return "config";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "error"
}

/// Result of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// Completed, but error or violation records were emitted.
    Failed,
}

impl Outcome {
    pub fn from_errors(errors: usize) -> Self {
        if errors == 0 {
            Outcome::Success
        } else {
            Outcome::Failed
        }
    }
}
