use std::path::PathBuf;

/// Errors produced anywhere in the training and evaluation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("data error in entry `{entry}`: {msg}")]
    Data { entry: String, msg: String },

    #[error("no labeled pixels")]
    NoLabeledPixels,

    #[error("structure mismatch: {0}")]
    Structure(String),

    #[error("non-finite loss component `{component}` at step {step}")]
    NonFinite { component: &'static str, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn data(entry: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Data {
            entry: entry.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
