use thiserror::Error;

use crate::schedule::Violation;

/// Errors surfaced by the planning library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("infeasible: {}", describe(.0))]
    Infeasible(Vec<Violation>),

    #[error("instance has no feasible plan: {0}")]
    NoFeasiblePlan(String),

    #[error("search space of {required} evaluations exceeds the cap of {cap}")]
    CapExceeded { required: u128, cap: u128 },

    #[error("usage error: {0}")]
    Usage(String),
}

fn describe(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by an infeasible instance or plan rather than bad input.
    pub fn is_infeasibility(&self) -> bool {
        matches!(self, Error::Infeasible(_) | Error::NoFeasiblePlan(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
