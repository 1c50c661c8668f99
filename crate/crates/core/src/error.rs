//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    InvalidArgument(String),
    /// A matrix or token buffer has the wrong shape for the operation.
    ShapeMismatch(String),
    /// A non-finite value was produced or supplied where finite values are required.
    NonFinite(String),
    /// An encoding-table or permutation index is out of bounds.
    IndexOutOfRange(String),
    /// An operation that requires data received none.
    EmptyInput(String),
    /// Training produced a non-finite loss.
    Diverged { epoch: usize, batch: usize },
    /// Fewer patients than folds.
    TooFewPatients { have: usize, need: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(s) => write!(f, "invalid argument: {s}"),
            Error::ShapeMismatch(s) => write!(f, "shape mismatch: {s}"),
            Error::NonFinite(s) => write!(f, "non-finite value: {s}"),
            Error::IndexOutOfRange(s) => write!(f, "index out of range: {s}"),
            Error::EmptyInput(s) => write!(f, "empty input: {s}"),
            Error::Diverged { epoch, batch } => {
                write!(f, "training diverged at epoch {epoch}, batch {batch}")
            }
            Error::TooFewPatients { have, need } => {
                write!(f, "need at least {need} patients, have {have}")
            }
        }
    }
}

impl core::error::Error for Error {}
