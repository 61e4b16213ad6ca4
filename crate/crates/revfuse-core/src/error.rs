//! Error type shared by every module in the core crate.

use alloc::string::String;
use core::fmt;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

/// All failure modes of the core pipeline.
///
/// The variants map onto the CLI exit-code classes: `Shape`, `Domain` and
/// `Format` are data errors; `Numeric` and `Inversion` are numeric failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Tensor shapes are inconsistent with the operation's contract.
    Shape(String),
    /// An argument is outside the operation's mathematical domain
    /// (negative sqrt input, zero divisor, step index out of range, ...).
    Domain(String),
    /// A non-finite value or a failed numeric sanity check was detected.
    Numeric(String),
    /// Reconstructing freed states by inversion diverged from the recorded
    /// forward pass beyond the diagnostic threshold.
    Inversion(String),
    /// The autodiff tape was used against its lifecycle rules.
    Tape(String),
    /// Malformed serialized data (PGM stream, checkpoint bytes, config text).
    Format(String),
}

impl Error {
    /// Short machine-parseable category tag, stable across releases.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Domain(_) => "domain",
            Error::Numeric(_) => "numeric",
            Error::Inversion(_) => "inversion",
            Error::Tape(_) => "tape",
            Error::Format(_) => "format",
        }
    }

    fn message(&self) -> &str {
        match self {
            Error::Shape(m)
            | Error::Domain(m)
            | Error::Numeric(m)
            | Error::Inversion(m)
            | Error::Tape(m)
            | Error::Format(m) => m,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

#[cfg(test)]
impl std::error::Error for Error {}

/// Builds a `Shape` error from format arguments.
#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(alloc::format!($($arg)*)) };
}

/// Builds a `Domain` error from format arguments.
#[macro_export]
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::Error::Domain(alloc::format!($($arg)*)) };
}
