//! Error type shared across the codec.

use std::fmt;

/// Errors produced by the codec library.
///
/// `exit_code` groups variants into the process-level contract used by the
/// CLI: 1 usage, 2 data error, 3 numeric failure.
#[derive(Debug, Clone, PartialEq)]
pub enum SapmError {
    /// Malformed input data: bad file format, truncated stream, bad magic.
    Format(String),
    /// I/O failure while reading or writing an artifact.
    Io(String),
    /// Invalid configuration or argument combination.
    Config(String),
    /// Numerical failure: non-finite values, domain violations, failed
    /// eigendecomposition, diverged training.
    Numeric(String),
}

impl SapmError {
    pub fn format(m: impl Into<String>) -> SapmError {
        SapmError::Format(m.into())
    }

    pub fn io(m: impl Into<String>) -> SapmError {
        SapmError::Io(m.into())
    }

    pub fn config(m: impl Into<String>) -> SapmError {
        SapmError::Config(m.into())
    }

    pub fn numeric(m: impl Into<String>) -> SapmError {
        SapmError::Numeric(m.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            SapmError::Config(_) => 1,
            SapmError::Format(_) | SapmError::Io(_) => 2,
            SapmError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for SapmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SapmError::Format(m) => write!(f, "format error: {m}"),
            SapmError::Io(m) => write!(f, "io error: {m}"),
            SapmError::Config(m) => write!(f, "config error: {m}"),
            SapmError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for SapmError {}

impl From<std::io::Error> for SapmError {
    fn from(e: std::io::Error) -> Self {
        SapmError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SapmError>;
