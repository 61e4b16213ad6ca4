//! CLI-level errors with process exit codes.
//!
//! Every failure leaving `main` is one of three classes, each with a fixed
//! exit code and a one-line, machine-parseable stderr rendering of the form
//! `error: <category>: <message>`.

use std::fmt;

use revfuse_core::Error as CoreError;

/// Exit code for malformed invocations and configs.
pub const EXIT_USAGE: u8 = 1;
/// Exit code for missing/corrupt data, files, or checkpoints.
pub const EXIT_DATA: u8 = 2;
/// Exit code for numeric failures (non-finite values, failed inversion).
pub const EXIT_NUMERIC: u8 = 3;

/// A terminal CLI failure: an exit-code class plus a human explanation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }

    /// Stable category tag matching the exit code.
    pub fn category(&self) -> &'static str {
        match self.code {
            EXIT_USAGE => "usage",
            EXIT_NUMERIC => "numeric",
            _ => "data",
        }
    }

    /// The single-line stderr rendering: `error: <category>: <message>`.
    pub fn render(&self) -> String {
        let mut flat = String::with_capacity(self.message.len());
        for (k, line) in self.message.lines().enumerate() {
            if k > 0 {
                flat.push_str("; ");
            }
            flat.push_str(line.trim_end());
        }
        format!("error: {}: {}", self.category(), flat)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl From<CoreError> for CliError {
    /// Numeric and inversion failures keep their class; everything else
    /// (shapes, domains, formats, tape misuse) is a data problem from the
    /// user's point of view.
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numeric(_) | CoreError::Inversion(_) => CliError::numeric(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

/// Wraps an IO error with the path it concerned.
pub fn io_err(path: &std::path::Path, action: &str, e: std::io::Error) -> CliError {
    CliError::data(format!("{action} {}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_track_exit_codes() {
        assert_eq!(CliError::usage("x").category(), "usage");
        assert_eq!(CliError::data("x").category(), "data");
        assert_eq!(CliError::numeric("x").category(), "numeric");
        assert_eq!(CliError::usage("x").code, 1);
        assert_eq!(CliError::data("x").code, 2);
        assert_eq!(CliError::numeric("x").code, 3);
    }

    #[test]
    fn render_is_single_line() {
        let e = CliError::data("first\nsecond\nthird");
        let r = e.render();
        assert_eq!(r, "error: data: first; second; third");
        assert!(!r.contains('\n'));
    }

    #[test]
    fn core_errors_map_to_classes() {
        let n: CliError = CoreError::Numeric("boom".into()).into();
        assert_eq!(n.code, EXIT_NUMERIC);
        let i: CliError = CoreError::Inversion("drift".into()).into();
        assert_eq!(i.code, EXIT_NUMERIC);
        let s: CliError = CoreError::Shape("bad".into()).into();
        assert_eq!(s.code, EXIT_DATA);
        let f: CliError = CoreError::Format("bad".into()).into();
        assert_eq!(f.code, EXIT_DATA);
    }
}
