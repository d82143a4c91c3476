use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PdfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PdfError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed weight file header: {0}")]
    MalformedHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("inconsistent action dimension: candidate {index} has {actual} dims, expected {expected}")]
    InconsistentDims {
        index: usize,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {term}")]
    Numeric { term: &'static str },

    #[error("behavior cloning diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("rollout buffer is empty")]
    EmptyBuffer,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("step called after the episode finished")]
    StepAfterDone,

    #[error("feedback requested before the episode finished")]
    CalledBeforeDone,

    #[error("scripted expert only supports unshifted layouts (got {0})")]
    UnsupportedShift(String),

    #[error("policy snapshot not found at {0}")]
    MissingSnapshot(PathBuf),
}

impl PdfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PdfError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        PdfError::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors that originate in a user-supplied configuration.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            PdfError::InvalidConfig(_)
                | PdfError::UnsupportedShift(_)
                | PdfError::InvalidValue(_)
                | PdfError::MissingSnapshot(_)
        )
    }

    /// True for errors raised by non-finite arithmetic.
    pub fn is_numeric_error(&self) -> bool {
        matches!(self, PdfError::Numeric { .. } | PdfError::Divergence { .. })
    }
}
