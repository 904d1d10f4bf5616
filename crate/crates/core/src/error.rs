use std::fmt;
use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug)]
pub enum Error {
    /// An operation was called with arguments violating its contract
    /// (shape mismatch, invalid kernel size, ...). The message names the
    /// offending dimension or argument.
    Contract(String),
    /// A configuration is invalid (unsupported scale, channel width not
    /// divisible by the attention reduction, empty dataset, ...).
    Config(String),
    /// Training produced a non-finite loss; carries the step index at
    /// which it was detected.
    NonFinite { step: usize },
    /// File I/O failure, with the path involved.
    Io { path: PathBuf, source: std::io::Error },
    /// A file exists but its contents are not what the format requires.
    Format { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::NonFinite { step } => {
                write!(f, "non-finite loss at step {step}")
            }
            Error::Io { path, source } => {
                write!(f, "i/o error on {}: {source}", path.display())
            }
            Error::Format { path, message } => {
                write!(f, "malformed file {}: {message}", path.display())
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
