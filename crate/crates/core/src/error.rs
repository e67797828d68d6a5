use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Manifest validation failures. Each variant carries a stable code so
/// callers (and the C ABI) can distinguish them without string matching.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManifestError {
    #[error("duplicate slide id `{0}`")]
    DuplicateSlide(String),
    #[error("slide `{slide}` has label `{label}` which is not in the class list")]
    UnknownLabel { slide: String, label: String },
    #[error("slide `{slide}`: embedding has dim {actual}, manifest declares {expected}")]
    DimMismatch {
        slide: String,
        expected: usize,
        actual: usize,
    },
    #[error("slide `{slide}`: embedding file {path} is missing")]
    MissingEmbedding { slide: String, path: PathBuf },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
}

impl ManifestError {
    pub fn code(&self) -> u32 {
        match self {
            ManifestError::DuplicateSlide(_) => 101,
            ManifestError::UnknownLabel { .. } => 102,
            ManifestError::DimMismatch { .. } => 103,
            ManifestError::MissingEmbedding { .. } => 104,
            ManifestError::Syntax { .. } => 105,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("bag `{0}` has no patches")]
    EmptyBag(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, slide `{slide}` (loss {loss})")]
    Divergence {
        epoch: usize,
        slide: String,
        loss: f64,
    },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration, as opposed to
    /// failures that happen while computing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. }
                | Error::Index { .. }
                | Error::EmptyBag(_)
                | Error::Config(_)
                | Error::Manifest(_)
                | Error::Format { .. }
                | Error::Io { .. }
        )
    }
}
