use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroRow { row: usize },

    #[error("non-finite value in {tensor} at index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("similarity matrix has the wrong kind: expected {expected}, found {found}")]
    WrongKind { expected: String, found: String },

    #[error("text-image matrix is not the transpose of the image-text matrix (max deviation {0:e})")]
    TransposeMismatch(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocabulary { id: u32, size: usize },

    #[error("text input is empty")]
    EmptyText,

    #[error("text input has {len} tokens, more than the maximum {max}")]
    TextTooLong { len: usize, max: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no band table entry for measurement key `{0}`")]
    MissingBand(String),

    #[error("unknown measurement key `{0}`")]
    UnknownKey(String),

    #[error("cannot parse a severity grade from `{0}`")]
    UnparseablePhrase(String),

    #[error("AUC undefined: labels contain a single class")]
    AucUndefined,

    #[error("invalid k={k} for corpus of size {n}")]
    InvalidK { k: usize, n: usize },

    #[error("no prompt pair for disease `{0}`")]
    MissingPrompt(String),

    #[error("training produced NaN in {0}")]
    NanDetected(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
