use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    ConfigParse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a binary PGM image: expected magic P5, found {0:?}")]
    PgmMagic(String),

    #[error("malformed PGM image: {0}")]
    PgmFormat(String),

    #[error("annotation line {line}: {msg}")]
    Annotation { line: usize, msg: String },

    #[error("weight file has bad magic bytes")]
    BadMagic,

    #[error("weight file has unknown format version {0}")]
    UnknownVersion(u32),

    #[error("weight file is truncated")]
    Truncated,

    #[error("weight file is malformed: {0}")]
    WeightFormat(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("gradient tape: {0}")]
    Tape(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
