use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value became NaN/Inf, or an input that must be finite was not.
    #[error("numerics error in {op}: {msg}")]
    Numerics { op: &'static str, msg: String },

    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("linear algebra error: {0}")]
    LinAlg(String),

    #[error("invalid UTF-8 in caption text: {0}")]
    Encoding(String),

    #[error("caption has no tokens")]
    EmptyCaption,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },

    #[error("all words are masked for batch item {item}")]
    Mask { item: usize },

    #[error("batch error: {0}")]
    Batch(String),

    #[error("training failed at epoch {epoch}: {component} {msg}")]
    Training {
        epoch: usize,
        component: String,
        msg: String,
    },

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("invalid checkpoint {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn numerics(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Numerics {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
