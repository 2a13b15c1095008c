use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on shapes, ranges or finiteness was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("mesh lacks a UV atlas")]
    MissingUvAtlas,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("palette sidecar not found: {0}")]
    PaletteNotFound(PathBuf),

    /// An operation produced nothing to work with (empty list, no valid cells).
    #[error("{0}")]
    Empty(String),

    #[error("non-finite energy at view {view}: {detail}")]
    NonFinite { view: usize, detail: String },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the CLI: 2 for empty-result errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Empty(_) => 2,
            _ => 1,
        }
    }
}
