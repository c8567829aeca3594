use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received inputs that violate its shape or value contract.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("{op}: index {index} out of bounds for table with {len} rows")]
    Lookup {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("dataset is empty after {stage}")]
    EmptyDataset { stage: &'static str },

    #[error("empty partition after split (train={train}, valid={valid}, test={test})")]
    EmptyPartition {
        train: usize,
        valid: usize,
        test: usize,
    },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },

    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("missing prerequisite for stage {stage}: {what}")]
    MissingPrerequisite { stage: u8, what: String },

    #[error("frozen parameter group `{group}` changed during stage {stage}")]
    FrozenDrift { stage: u8, group: String },

    #[error("training diverged at {at}: {detail}")]
    Diverged { at: String, detail: String },

    #[error("unknown variant `{name}`; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
