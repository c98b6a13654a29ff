use std::io;

use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("input shape mismatch: expected {expected}, got {actual}")]
    InputShape { expected: String, actual: String },

    #[error("architecture mismatch between networks")]
    ArchMismatch,

    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),

    #[error("permutation spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("degenerate plane: anchor points are collinear or coincident")]
    DegeneratePlane,

    #[error("no checkpoint for epoch {0}")]
    MissingCheckpoint(usize),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        last_good: Box<Checkpoint>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::InputShape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
