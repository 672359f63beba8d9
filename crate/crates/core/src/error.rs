//! Error type shared by every module of the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or input is outside the domain of the operation.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The parameters describe weak coupling where a strong-coupling quantity was requested.
    #[error(
        "no real splitting: strong-coupling condition g^2 > (gamma_x - gamma_m)^2/16 violated"
    )]
    WeakCoupling,

    /// A numerical procedure failed (singular system, lost normalization, non-convergence).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code: 2 for input/configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
