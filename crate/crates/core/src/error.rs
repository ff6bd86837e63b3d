use std::path::PathBuf;

use thiserror::Error;

use crate::sampler::Trajectory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("codebook dimension {dim} too small for {classes} classes (need classes < dim/2)")]
    DimensionTooSmall { classes: usize, dim: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfDomain {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("non-finite value in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    /// Inference failed after the trajectory was computed; the trajectory is
    /// kept for diagnosis.
    #[error("inference failed: {source}")]
    Inference {
        #[source]
        source: Box<Error>,
        trajectory: Box<Trajectory>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by the CLI to choose an exit code.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Format { .. } | Error::Io { .. } => ErrorKind::Data,
            Error::Numeric { .. } | Error::DegenerateInput(_) => ErrorKind::Numeric,
            Error::Inference { source, .. } => source.kind(),
            Error::InvalidArgument(_)
            | Error::DimensionTooSmall { .. }
            | Error::OutOfDomain { .. } => ErrorKind::Usage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Config,
    Data,
    Numeric,
}
