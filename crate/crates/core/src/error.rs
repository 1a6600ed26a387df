//! Error type shared by every module.

use std::io;

/// Errors produced by trace I/O, simulation, modelling and rendering.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    /// A line of a JSONL file could not be parsed. Lines are 1-based.
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    /// Well-formed input that violates a data-model invariant.
    #[error("{}validation error: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Validation { line: Option<usize>, message: String },

    /// Invalid parameters, detected before any work starts.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// A requested layer or token is not present in the input.
    #[error("selection error: {0}")]
    Selection(String),

    #[error("fit error: {0}")]
    Fit(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn invalid(line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Validation {
            line,
            message: message.into(),
        }
    }

    /// True for errors caused by bad data or failed I/O, as opposed to bad
    /// parameters. The CLI maps the former to exit code 1 and the latter to 2.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Parse { .. } | Error::Validation { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
