use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("domain error in {op}: invalid input {value} at flat index {index}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unknown dtype tag {tag} in {path}")]
    UnknownDtype { path: PathBuf, tag: u8 },

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error("missing file referenced by manifest: {0}")]
    MissingFile(PathBuf),

    #[error("non-finite gradient for parameter {name} at iteration {iteration}")]
    NonFiniteGradient { name: String, iteration: u64 },

    #[error("non-finite loss at iteration {0}")]
    NonFiniteLoss(u64),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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

    /// True for errors caused by bad user input (arguments, configs, files)
    /// rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::State(_)
                | Error::Format { .. }
                | Error::Truncated { .. }
                | Error::UnknownDtype { .. }
                | Error::Manifest { .. }
                | Error::MissingFile(_)
                | Error::Json(_)
        )
    }
}
