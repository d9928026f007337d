use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("length mismatch: expected {expected} elements, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),

    #[error("invalid value for `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("wrong dtype: expected {expected}, found {found}")]
    WrongDtype { expected: &'static str, found: &'static str },

    #[error("no foreground present")]
    NoForeground,

    #[error("fewer distinct values than k ({distinct} < {k})")]
    TooFewDistinctValues { distinct: usize, k: usize },

    #[error("spatial dimension {dim} = {len} is not divisible by {divisor}")]
    Indivisible { dim: &'static str, len: usize, divisor: usize },

    #[error("no gradient available: {0}")]
    NoGradient(String),

    #[error("phantom blobs cannot fit: {0}")]
    PhantomFit(String),

    #[error("empty input: {0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { field, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::UnknownDtype(_) => "unknown_dtype",
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::WrongDtype { .. } => "wrong_dtype",
            Error::NoForeground => "no_foreground",
            Error::TooFewDistinctValues { .. } => "too_few_distinct_values",
            Error::Indivisible { .. } => "indivisible",
            Error::NoGradient(_) => "no_gradient",
            Error::PhantomFit(_) => "phantom_fit",
            Error::Empty(_) => "empty",
        }
    }

    /// The offending field or dimension, when the error names one.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            Error::InvalidParameter { field, .. } => Some(field),
            Error::Indivisible { dim, .. } => Some(dim),
            Error::Empty(what) => Some(what),
            _ => None,
        }
    }

    /// The file involved, for I/O and parse failures.
    pub fn path(&self) -> Option<&std::path::Path> {
        match self {
            Error::Io { path, .. } | Error::Json { path, .. } => Some(path),
            _ => None,
        }
    }
}
