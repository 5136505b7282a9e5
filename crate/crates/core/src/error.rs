use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("mass matrix is singular (condition estimate {condition:.3e})")]
    SingularMassMatrix { condition: f64 },

    #[error("episode already finished; call reset before stepping again")]
    EpisodeFinished,

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("backward called before forward")]
    NoForwardCache,

    #[error("network specs differ: {0}")]
    SpecMismatch(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite {
        context: &'static str,
        detail: String,
    },

    #[error("replay buffer holds {len} transitions, batch needs {needed}")]
    InsufficientSamples { len: usize, needed: usize },

    #[error("no stabilizing gains in search grid ({evaluated} candidates rejected)")]
    NoFeasibleGains { evaluated: usize },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
