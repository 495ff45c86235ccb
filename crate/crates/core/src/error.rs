use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the recommendation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("unknown category {index} for field `{field}` (cardinality {cardinality})")]
    UnknownCategory {
        field: &'static str,
        index: u32,
        cardinality: u32,
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("AUROC undefined: labels contain a single class")]
    SingleClass,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
