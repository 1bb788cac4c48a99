use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed input file; `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value at line {line}, column {column}")]
    Value { line: usize, column: usize },

    #[error("label {label} at line {line} is outside [0, {n_labels})")]
    Label {
        line: usize,
        label: i64,
        n_labels: usize,
    },

    /// A numeric argument fell outside its domain.
    #[error("{0}")]
    Domain(String),

    #[error("unsupported certificate: {scheme} smoothing against the {norm} ball")]
    UnsupportedCertificate { scheme: &'static str, norm: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A user callback failed while scoring example `index`.
    #[error("score callback failed at example {index}: {message}")]
    Callback { index: usize, message: String },

    /// Row-level invariant violation (e.g. a loss row that is not monotone).
    #[error("invalid value in example {example}: {message}")]
    InvalidRow { example: usize, message: String },

    /// `c_down[c_up[p]]` failed to return `p` for the chosen smoothing.
    #[error("certificate round trip failed: {nominal} became {recovered}")]
    RoundTrip { nominal: f64, recovered: f64 },

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
