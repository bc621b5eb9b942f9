use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid language tag {0:?}")]
    InvalidTag(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible model: field `{field}` differs (expected {expected}, found {found})")]
    Incompatible {
        field: String,
        expected: String,
        found: String,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate batch: no valid target tokens")]
    DegenerateBatch,

    #[error("non-finite values in tensor `{0}`")]
    NonFinite(String),

    #[error("invalid reference: {0}")]
    InvalidReference(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
    Io,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Rebuilds an equivalent error, for reporting one failure in several places.
    pub fn duplicate(&self) -> Self {
        match self {
            Error::InvalidInput(m) => Error::InvalidInput(m.clone()),
            Error::InvalidTag(m) => Error::InvalidTag(m.clone()),
            Error::Format(m) => Error::Format(m.clone()),
            Error::InsufficientData(m) => Error::InsufficientData(m.clone()),
            Error::Config(m) => Error::Config(m.clone()),
            Error::Incompatible {
                field,
                expected,
                found,
            } => Error::Incompatible {
                field: field.clone(),
                expected: expected.clone(),
                found: found.clone(),
            },
            Error::Shape(m) => Error::Shape(m.clone()),
            Error::DegenerateBatch => Error::DegenerateBatch,
            Error::NonFinite(m) => Error::NonFinite(m.clone()),
            Error::InvalidReference(m) => Error::InvalidReference(m.clone()),
            Error::UndefinedCorrelation(m) => Error::UndefinedCorrelation(m.clone()),
            Error::Checkpoint(m) => Error::Checkpoint(m.clone()),
            Error::Io { path, source } => Error::Io {
                path: path.clone(),
                source: std::io::Error::new(source.kind(), source.to_string()),
            },
            Error::Json(e) => Error::Json(serde::de::Error::custom(e.to_string())),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Incompatible { .. } | Error::Json(_) => ErrorKind::Config,
            Error::InvalidInput(_)
            | Error::InvalidTag(_)
            | Error::Format(_)
            | Error::InsufficientData(_)
            | Error::InvalidReference(_)
            | Error::Checkpoint(_) => ErrorKind::Data,
            Error::Shape(_)
            | Error::DegenerateBatch
            | Error::NonFinite(_)
            | Error::UndefinedCorrelation(_) => ErrorKind::Numeric,
            Error::Io { .. } => ErrorKind::Io,
        }
    }
}
