use std::path::PathBuf;

use thiserror::Error;

use crate::model::Checkpoint;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("component not ready: {0}")]
    NotReady(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// Carries the last parameter state whose loss was still finite.
    #[error("training diverged at step {step}: loss = {loss}")]
    TrainingDiverged {
        step: usize,
        loss: f64,
        last_finite: Box<Checkpoint>,
    },

    #[error("sampling budget exhausted: requested {requested} lines, {available} remain")]
    BudgetExhausted { requested: usize, available: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("internal consistency violation: {0}")]
    Internal(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for user/config problems, 2 for internal invariant violations.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Internal(_) => 2,
            _ => 1,
        }
    }
}
