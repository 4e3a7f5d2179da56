//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Two shapes that were required to be compatible are not.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A scalar or structural argument is out of its documented range.
    InvalidArgument { op: &'static str, msg: String },
    /// A data or container file violates its binary format.
    Format { path: String, msg: String },
    Io { path: String, source: std::io::Error },
    /// A loss or gradient became non-finite; names the offending value.
    NonFinite { what: String },
    Config { msg: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch: lhs={lhs:?}, rhs={rhs:?}")
            }
            Error::InvalidArgument { op, msg } => write!(f, "{op}: {msg}"),
            Error::Format { path, msg } => write!(f, "{path}: {msg}"),
            Error::Io { path, source } => write!(f, "{path}: {source}"),
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::Config { msg } => write!(f, "config: {msg}"),
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

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
