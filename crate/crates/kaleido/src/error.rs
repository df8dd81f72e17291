//! Error type shared across the crate.

use std::fmt;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum KbError {
    /// Invalid command-line usage or configuration.
    Usage(String),
    /// Corrupt or malformed file content. `record` is the index of the
    /// offending record when known.
    Format { msg: String, record: Option<usize> },
    /// Numeric failure: non-finite values, gradient-check failure.
    Numeric(String),
    /// Tensor shape mismatch.
    Shape(String),
    /// Out-of-range index (labels, token ids, patch ids).
    Index(String),
    /// A caller violated an operation's precondition.
    Contract(String),
    /// Foreground extraction found no object pixels.
    EmptyForeground,
    Io(std::io::Error),
}

impl fmt::Display for KbError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KbError::Usage(m) => write!(f, "usage error: {m}"),
            KbError::Format { msg, record: Some(i) } => {
                write!(f, "format error at record {i}: {msg}")
            }
            KbError::Format { msg, record: None } => write!(f, "format error: {msg}"),
            KbError::Numeric(m) => write!(f, "numeric error: {m}"),
            KbError::Shape(m) => write!(f, "shape error: {m}"),
            KbError::Index(m) => write!(f, "index error: {m}"),
            KbError::Contract(m) => write!(f, "contract violation: {m}"),
            KbError::EmptyForeground => write!(f, "empty foreground: image has no object pixels"),
            KbError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for KbError {}

impl From<std::io::Error> for KbError {
    fn from(e: std::io::Error) -> Self {
        KbError::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, KbError>;

impl KbError {
    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            KbError::Usage(_) => 1,
            KbError::Numeric(_) => 3,
            _ => 2,
        }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        KbError::Format { msg: msg.into(), record: None }
    }

    pub fn format_at(record: usize, msg: impl Into<String>) -> Self {
        KbError::Format { msg: msg.into(), record: Some(record) }
    }
}
