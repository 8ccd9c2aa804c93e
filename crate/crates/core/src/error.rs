use thiserror::Error;

/// Errors produced by channel synthesis, estimation and bound computation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The model is not identifiable from the supplied data (rank deficiency,
    /// ill-conditioned normal equations, singular FIM).
    #[error("not identifiable: {reason}")]
    Identifiability {
        reason: String,
        /// Parameter indices spanning the numerical null space, when known.
        null_params: Vec<usize>,
    },

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("found {found} spectral peaks, {wanted} requested")]
    PeakShortfall { found: usize, wanted: usize },

    #[error("insufficient training: {0}")]
    InsufficientTraining(String),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn unidentifiable(reason: impl Into<String>) -> Self {
        Error::Identifiability {
            reason: reason.into(),
            null_params: Vec::new(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
