use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NmfreError>;

#[derive(Debug, Error)]
pub enum NmfreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} (record {record}): {message}")]
    Parse {
        path: PathBuf,
        record: usize,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("negative data entry {value} at row {row}, column {col}")]
    NegativeData { row: usize, col: usize, value: f64 },

    #[error("non-finite value in {what} at row {row}, column {col}")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("column {column} of the basis collapsed to zero mass")]
    DegenerateColumn { column: usize },

    #[error("infeasible dfU cap: df_max = {df_max} must lie strictly inside (0, {nq})")]
    CapInfeasible { df_max: f64, nq: f64 },

    #[error("non-positive residual degrees of freedom ({denominator}) for the variance scale")]
    NonPositiveDf { denominator: f64 },

    #[error("singular information: the {factor} factor is not invertible")]
    SingularInformation { factor: &'static str },

    #[error("{failed} of {total} Monte Carlo replicates failed (limit is 1%)")]
    SimulationFailure { failed: usize, total: usize },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}
