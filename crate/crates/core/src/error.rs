use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t:.9} s is outside the valid span [{start:.9}, {end:.9})")]
    OutOfSpan { t: f64, start: f64, end: f64 },

    #[error("invalid derivative order {0} (expected 0, 1 or 2)")]
    InvalidOrder(u8),

    #[error("orientation increment {index} has magnitude {norm} ≥ π")]
    IncrementTooLarge { index: usize, norm: f64 },

    #[error("stale measurement at {t:.9} s precedes the active segment start {segment_start:.9} s")]
    StaleMeasurement { t: f64, segment_start: f64 },

    #[error("innovation matrix is numerically singular (condition estimate {condition:e})")]
    SingularInnovation { condition: f64 },

    #[error("prior covariance is not positive definite")]
    SingularPrior,

    #[error("non-finite residual from measurement {index}")]
    NonFiniteResidual { index: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty timing list")]
    EmptyTimings,

    #[error("trajectories do not overlap in time")]
    NoOverlap,

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("estimator failure at batch {batch}: {source}")]
    Estimator {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code: 1 for input problems, 2 for estimator failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Estimator { .. } | Error::SingularInnovation { .. } | Error::SingularPrior => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
