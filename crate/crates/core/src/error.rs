use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure kinds, grouped so callers can tell bad input from numerical trouble.
#[derive(Debug, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation: {0}")]
    Schema(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no jump law")]
    NoJumpLaw,
    #[error("grid too coarse to resolve zeros of the linearizer near t = {t}; refinement required")]
    RefinementRequired { t: f64 },
    #[error("condition (A_int) violated: {0}")]
    ConditionViolated(String),
    #[error("pay-off undefined at focal time t = {t}")]
    FocalTime { t: f64 },
    #[error("singular coefficients at t = {t}")]
    Singular { t: f64 },
    #[error("quadrature did not converge: |S(M) - S(2M)| = {delta:e} at M = {nodes}")]
    Quadrature { delta: f64, nodes: usize },
    #[error("grid under-resolved: {0}")]
    GridUnderResolved(String),
    #[error("residual validation failed: residual {residual:e} exceeds {tolerance:e} ({what})")]
    Residual {
        what: String,
        residual: f64,
        tolerance: f64,
    },
    #[error("fixed-point iteration did not converge after {iterations} iterations; last increment {increment:e}")]
    NotConverged { iterations: usize, increment: f64 },
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("indeterminate: {0}")]
    Indeterminate(String),
    #[error("simulation: {0}")]
    Simulation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True for failures caused by the input document or arguments rather than the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Syntax { .. }
                | Error::Schema(_)
                | Error::Invalid(_)
                | Error::Argument(_)
                | Error::NoJumpLaw
                | Error::Io { .. }
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
