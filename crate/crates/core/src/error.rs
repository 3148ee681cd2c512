use std::path::PathBuf;

use thiserror::Error;

use crate::solver::SolverError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Solver(#[from] SolverError),

    #[error("grid step {index} (tau = {tau:.4}) failed: {source}")]
    Step {
        index: usize,
        tau: f64,
        #[source]
        source: SolverError,
    },

    #[error("cross-validation fit failed (fold {fold}, lambda = {lambda:e}): {source}")]
    Fold {
        fold: usize,
        lambda: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("replication {replication} failed: {source}")]
    Replication {
        replication: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("argument outside its domain: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tau = {tau} lies in no partition cell")]
    PartitionMismatch { tau: f64 },

    #[error("oracle dimension {oracle} does not match data dimension {data}")]
    OracleMismatch { oracle: usize, data: usize },

    #[error("derivative matrix is numerically singular at tau = {tau:.4}")]
    SingularDerivative { tau: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True when the failure came from the numerics rather than from bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Solver(_) | Error::Step { .. } | Error::SingularDerivative { .. } => true,
            Error::Fold { source, .. } | Error::Replication { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
