//! Crate-wide error type.

use thiserror::Error;

/// Coarse classification used to map errors onto process exit codes and
/// wire-level error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Contract violations, shape/validation/parse/format problems.
    Validation,
    /// Authentication or sealing failures.
    Auth,
    /// Trusted-world secure-memory budget exhausted.
    OutOfSecureMemory,
    /// Channel/session protocol problems.
    Protocol,
    /// Underlying I/O failure.
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("layer {layer}: input shape {actual} does not match expected {expected}")]
    ShapeMismatch {
        layer: usize,
        expected: String,
        actual: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("state error: {0}")]
    State(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("{0} trailing byte(s) after end of structure")]
    TrailingBytes(usize),

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("record {index}: {message}")]
    Record { index: usize, message: String },

    #[error("authentication failure")]
    Auth,

    #[error("duplicate nonce in sealed container")]
    DuplicateNonce,

    #[error("key must be exactly 16 bytes, got {0}")]
    KeyLength(usize),

    #[error("out of secure memory: requested {requested} bytes, {available} available")]
    OutOfSecureMemory { requested: u64, available: u64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("session refused: {0}")]
    SessionRefused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Auth | Error::DuplicateNonce | Error::KeyLength(_) => ErrorCategory::Auth,
            Error::OutOfSecureMemory { .. } => ErrorCategory::OutOfSecureMemory,
            Error::Protocol(_) | Error::Framing(_) => ErrorCategory::Protocol,
            Error::Io(_) => ErrorCategory::Io,
            Error::SessionRefused(_) => ErrorCategory::Protocol,
            _ => ErrorCategory::Validation,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
