use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or lengths that do not fit together.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration or argument value outside its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A caller broke an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// NaN or infinity appeared where finite values are required.
    #[error("numeric failure: {0}")]
    NonFinite(String),

    /// Malformed input file.
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Input that parses but violates a domain rule.
    #[error("validation error: {0}")]
    Validation(String),

    /// An operation that would produce no data.
    #[error("empty result: {0}")]
    EmptyResult(String),

    /// A metric whose definition breaks down on the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Prefixes the message with `ctx`; I/O errors pass through unchanged.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
            Error::Parameter(m) => Error::Parameter(format!("{ctx}: {m}")),
            Error::Contract(m) => Error::Contract(format!("{ctx}: {m}")),
            Error::NonFinite(m) => Error::NonFinite(format!("{ctx}: {m}")),
            Error::Format { line, msg } => Error::Format { line, msg: format!("{ctx}: {msg}") },
            Error::Validation(m) => Error::Validation(format!("{ctx}: {m}")),
            Error::EmptyResult(m) => Error::EmptyResult(format!("{ctx}: {m}")),
            Error::UndefinedMetric(m) => Error::UndefinedMetric(format!("{ctx}: {m}")),
            Error::Io(e) => Error::Io(e),
        }
    }
}

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
