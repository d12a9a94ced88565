//! Error types shared across the toolkit.

use crate::engine::EpochRecord;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty forget set: {0}")]
    EmptyForgetSet(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    /// Unlearning aborted on a non-finite loss; carries the trajectory
    /// completed before the failing epoch.
    #[error("unlearning diverged at epoch {epoch}")]
    UnlearnDiverged {
        epoch: usize,
        partial: Vec<EpochRecord>,
    },

    #[error("incomplete weight table: missing example index {0}")]
    IncompleteTable(usize),

    #[error("degenerate reference table: mean loss not positive at t={0}")]
    DegenerateTable(usize),

    #[error("missing table: {0}")]
    MissingTable(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Nn(#[from] unlearn_nn::NnError),
}

pub type Result<T> = std::result::Result<T, CoreError>;
