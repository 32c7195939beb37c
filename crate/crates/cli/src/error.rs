use std::fmt::Write as _;

use scmarket_core::model::Violation;
use thiserror::Error;

/// Exit code for malformed input or invalid scenarios.
pub const EXIT_INPUT: i32 = 1;
/// Exit code when a solver fails to converge or a trajectory diverges.
pub const EXIT_NONCONVERGENCE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{path}: schema version {found} is not supported (expected {expected})")]
    Version { path: String, found: u32, expected: u32 },
    #[error("{path}: invalid scenario:{}", list(.violations))]
    Invalid { path: String, violations: Vec<Violation> },
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Solver(String),
    #[error("{0}")]
    NotConverged(String),
}

fn list(violations: &[Violation]) -> String {
    violations.iter().fold(String::new(), |mut s, v| {
        let _ = write!(s, "\n  {v}");
        s
    })
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NotConverged(_) => EXIT_NONCONVERGENCE,
            _ => EXIT_INPUT,
        }
    }
}
