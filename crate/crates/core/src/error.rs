use std::io;

use thiserror::Error;

/// Errors produced anywhere in the quantization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Input violates a documented precondition (shape, range, finiteness).
    #[error("validation error: {0}")]
    Validation(String),
    /// A value does not fit the requested storage precision.
    #[error("overflow error: {0}")]
    Overflow(String),
    /// A factorization or inversion failed or was too ill-conditioned to trust.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Container header or structure is not what the reader expects.
    #[error("format error: {0}")]
    Format(String),
    /// Container structure is readable but its payload is inconsistent.
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Overflow(_) => 2,
            Error::Numerical(_) => 3,
            Error::Format(_) | Error::Corruption(_) | Error::Io(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err($crate::error::Error::$variant(format!($($fmt)+))),
        }
    };
}
pub(crate) use ensure;
