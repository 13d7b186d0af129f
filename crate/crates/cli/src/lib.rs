//! Experiment runner: configuration, training runs, reports and comparisons.

pub mod config;
pub mod experiment;
pub mod report;

use std::fmt;

/// Problems with the invocation or the configuration (exit code 1).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

/// Distributed training diverged from the centralized reference (exit code 2).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleMismatch {
    pub seeds: Vec<u64>,
}

impl fmt::Display for OracleMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "distributed state differs from centralized training for seeds {:?}",
            self.seeds
        )
    }
}

impl std::error::Error for OracleMismatch {}

/// Process exit code for an error returned by one of the commands.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.chain().any(|e| e.is::<UserError>()) {
        1
    } else {
        2
    }
}
