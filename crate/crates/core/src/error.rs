use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants fall into two families that the CLI maps onto distinct exit
/// codes: input/validation problems and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("configuration error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("image error: {0}")]
    Image(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("no convergence: {0}")]
    NonConvergence(String),

    #[error("saddle point: {negative} negative Hessian eigenvalue(s), smallest {smallest:e}")]
    SaddlePoint { negative: usize, smallest: f64 },

    #[error("unstable modes at indices {0:?}")]
    UnstableModes(Vec<usize>),

    #[error("all ions below the imaging resolution")]
    BelowResolution,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach the pipeline stage that produced this error.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonConvergence(_)
            | Error::SaddlePoint { .. }
            | Error::UnstableModes(_)
            | Error::BelowResolution => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
