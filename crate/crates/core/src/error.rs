//! Error type shared by all operations in the crate.

use alloc::string::String;
use core::fmt;

/// Errors raised by tensor, attention, and conversion operations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// An argument is outside its documented domain (bad mode, odd rotary
    /// dimension, rank out of range, non-finite input, ...).
    InvalidArgument(String),
    /// Operand shapes are inconsistent with each other.
    ShapeMismatch(String),
    /// An operation was applied to state it does not fit, e.g. a decode
    /// step at a position that is not the current cache length.
    State(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
