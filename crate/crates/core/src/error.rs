//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse category used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or parameters (exit code 2).
    Config,
    /// Bad or missing data (exit code 3).
    Data,
    /// Numeric or optimization failure (exit code 4).
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("acquisition error: {0}")]
    Acquisition(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("empty region: {0}")]
    EmptyRegion(String),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("registration domain error: {0}")]
    RegistrationDomain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("optimization diverged: {reason}; metric trace: {trace:?}")]
    Optimization { reason: String, trace: Vec<f64> },
    #[error("field inversion did not converge: mean residual {residual_mm} mm")]
    Inversion { residual_mm: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("pipeline stage {stage} failed for {subject}: {source}")]
    Stage {
        stage: String,
        subject: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parameter(_) | Error::Config(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Unsupported(_)
            | Error::GridMismatch(_)
            | Error::Input(_)
            | Error::Acquisition(_)
            | Error::Geometry(_)
            | Error::EmptyRegion(_)
            | Error::Cache(_) => ErrorKind::Data,
            Error::Numeric(_)
            | Error::Optimization { .. }
            | Error::Inversion { .. }
            | Error::DegenerateSample(_)
            | Error::RegistrationDomain(_) => ErrorKind::Numeric,
            Error::Stage { source, .. } => source.kind(),
        }
    }
}
