use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum VelcError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate input in {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    Version { expected: String, found: String },

    #[error("non-finite loss term {term} at iteration {iteration} (value {value})")]
    NonFinite {
        term: &'static str,
        iteration: usize,
        value: f64,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("only one class present: {0}")]
    SingleClass(String),

    #[error("unknown sample id {0}")]
    UnknownId(usize),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl VelcError {
    /// Stable short code used by the command-line driver.
    pub fn code(&self) -> &'static str {
        match self {
            VelcError::Shape { .. } => "E_SHAPE",
            VelcError::Domain { .. } => "E_DOMAIN",
            VelcError::Contract(_) => "E_CONTRACT",
            VelcError::Degenerate { .. } => "E_DEGENERATE",
            VelcError::Parse { .. } => "E_PARSE",
            VelcError::Config(_) => "E_CONFIG",
            VelcError::Version { .. } => "E_VERSION",
            VelcError::NonFinite { .. } => "E_NONFINITE",
            VelcError::Empty(_) => "E_EMPTY",
            VelcError::SingleClass(_) => "E_SINGLE_CLASS",
            VelcError::UnknownId(_) => "E_UNKNOWN_ID",
            VelcError::Io { .. } => "E_IO",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VelcError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, line: usize, detail: impl Into<String>) -> Self {
        VelcError::Parse {
            path: path.to_string(),
            line,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, VelcError>;
