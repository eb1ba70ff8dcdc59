//! Error type shared by every module in the crate.
//!
//! Each variant is a distinct failure class so callers (the CLI in
//! particular) can map errors to stable exit codes. Messages are single-line
//! and machine-parsable: `kind: detail`.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DpqError>;

#[derive(Debug, Error)]
pub enum DpqError {
    /// Shape mismatch between operands (rows, cols, subspace counts, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Malformed binary file. `offset` is the byte position of the problem.
    #[error("format error at byte {offset}: {what}")]
    Format { offset: usize, what: String },

    /// Invalid configuration value or unknown configuration key.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Cross-file consistency violation (e.g. code index built against a
    /// different codebook than the one supplied).
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Operation needs more rows than the input provides.
    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    /// Constraint set of an optimization problem is empty.
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Training diverged or could not proceed.
    #[error("training error at epoch {epoch}, batch {batch}: {what}")]
    Training {
        epoch: usize,
        batch: usize,
        what: String,
    },

    /// Empty or otherwise unusable input data.
    #[error("input error: {0}")]
    Input(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DpqError {
    /// Short stable name of the failure class, used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            DpqError::Dimension(_) => "dimension",
            DpqError::Format { .. } => "format",
            DpqError::Config(_) => "config",
            DpqError::Numeric(_) => "numeric",
            DpqError::Integrity(_) => "integrity",
            DpqError::BatchTooSmall { .. } => "batch_too_small",
            DpqError::Infeasible(_) => "infeasible",
            DpqError::Training { .. } => "training",
            DpqError::Input(_) => "input",
            DpqError::Io(_) => "io",
        }
    }
}
