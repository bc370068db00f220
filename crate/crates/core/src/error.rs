//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong inside the library.
///
/// The CLI maps these onto process exit codes, so the split between variants
/// follows the caller's point of view: `Config`/`Shape`/`Usage` mean the
/// request itself was bad, `Parse`/`Io` mean the data on disk was bad, and
/// `Numeric` means a computation produced values it should not have.
#[derive(Debug)]
pub enum Error {
    /// Tensor or layer received operands with incompatible shapes.
    Shape(String),
    /// A configuration value is out of its documented range.
    Config(String),
    /// An API was driven in an unsupported order (e.g. reading gradients
    /// from a tape before running its backward pass).
    Usage(String),
    /// A binary or text artifact could not be decoded. `offset` is the byte
    /// position at which decoding failed, when that is meaningful.
    Parse {
        context: String,
        offset: Option<u64>,
    },
    /// A computation produced non-finite values from finite inputs, or was
    /// aborted because its inputs were already non-finite.
    Numeric(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl Error {
    pub fn parse(context: impl Into<String>, offset: u64) -> Self {
        Error::Parse {
            context: context.into(),
            offset: Some(offset),
        }
    }

    pub fn parse_at_end(context: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            offset: None,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Usage(msg) => write!(f, "usage error: {msg}"),
            Error::Parse {
                context,
                offset: Some(off),
            } => {
                write!(f, "parse error at byte {off}: {context}")
            }
            Error::Parse {
                context,
                offset: None,
            } => write!(f, "parse error: {context}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Json(err) => write!(f, "json error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            Error::Json(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        Error::Json(err)
    }
}
