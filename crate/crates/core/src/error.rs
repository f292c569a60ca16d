use std::fmt;

/// Errors surfaced by every module of the lab.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Vector norm at or below the normalization floor.
    NormTooSmall {
        norm: f64,
    },
    ShapeMismatch {
        expected: String,
        found: String,
    },
    NonFinite {
        context: &'static str,
    },
    /// A vector that must be unit-norm was not.
    NotUnit {
        norm: f64,
    },
    InvalidConfig {
        key: String,
        reason: String,
    },
    ArchitectureMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Power iteration hit a direction where `||Hv||` collapsed.
    DegeneratePowerIteration,
    CenterCapacity {
        num_ids: usize,
        input_dim: usize,
    },
    UnknownId(u32),
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NormTooSmall { norm } => write!(f, "vector norm {norm:e} is below the normalization floor"),
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected}, found {found}")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NotUnit { norm } => write!(f, "expected a unit vector, found norm {norm}"),
            Error::InvalidConfig { key, reason } => write!(f, "invalid config `{key}`: {reason}"),
            Error::ArchitectureMismatch { left, right } => {
                write!(f, "architecture mismatch: {left:?} vs {right:?}")
            }
            Error::DegeneratePowerIteration => {
                write!(f, "power iteration collapsed: ||Hv|| fell below 1e-12 twice")
            }
            Error::CenterCapacity { num_ids, input_dim } => {
                write!(f, "cannot place {num_ids} identity centers in {input_dim} dimensions under the similarity cap")
            }
            Error::UnknownId(id) => write!(f, "unknown identity {id}"),
            Error::Parse { line, column, message } => {
                write!(f, "parse error at line {line}, column {column}: {message}")
            }
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(key: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig { key: key.to_string(), reason: reason.into() }
}
