use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("retrieval protocol violated: {0}")]
    Protocol(String),

    #[error("tape was created without gradient recording")]
    NotRecording,

    #[error("archive {path}: bad magic bytes")]
    BadMagic { path: PathBuf },

    #[error("archive {path}: unsupported version {version}")]
    UnsupportedVersion { path: PathBuf, version: u16 },

    #[error("archive {path}: truncated while reading {what}")]
    Truncated { path: PathBuf, what: String },

    #[error("archive {path}: tensor `{name}` has shape {dims:?} which does not match its payload")]
    ShapeMismatch {
        path: PathBuf,
        name: String,
        dims: Vec<usize>,
    },

    #[error("archive {path}: item `{item}` has no class label")]
    Unlabeled { path: PathBuf, item: String },

    #[error("archive {path}: {detail}")]
    Manifest { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn degenerate(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Degenerate {
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

    /// True for errors caused by the file system or file contents rather
    /// than by the caller's configuration.
    pub fn is_file_error(&self) -> bool {
        matches!(
            self,
            Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::Truncated { .. }
                | Error::ShapeMismatch { .. }
                | Error::Unlabeled { .. }
                | Error::Manifest { .. }
                | Error::Io { .. }
                | Error::Json { .. }
        )
    }
}
