use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the assimilation pipeline.
///
/// Variants are grouped so that the CLI can map them onto exit codes with
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        dim: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration blow-up at step {step}")]
    IntegrationBlowup { step: usize },

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },

    #[error("non-finite state at Euler step {step}")]
    NonFiniteFlow { step: usize },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(dim: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            dim,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config error, 3 data/format error, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::ShapeMismatch { .. }
            | Error::OutOfRange(_)
            | Error::Format(_)
            | Error::ArchMismatch(_)
            | Error::Io { .. } => 3,
            Error::IntegrationBlowup { .. }
            | Error::NonFiniteActivation { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteFlow { .. }
            | Error::Singular(_) => 4,
        }
    }
}
