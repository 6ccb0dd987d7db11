use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("level {0} out of range 0..=30")]
    LevelOutOfRange(i64),
    #[error("invalid cell id {0:#018x}")]
    InvalidCell(u64),
    #[error("invalid cell token {0:?}")]
    InvalidToken(String),
    #[error("invalid lat/lng ({lat}, {lng})")]
    InvalidLatLng { lat: f64, lng: f64 },
    #[error("cell {child} is not a descendant of {parent}")]
    NotDescendant { child: String, parent: String },
    #[error("requested level {requested} is finer than cell level {level}")]
    LevelTooFine { requested: u8, level: u8 },
    #[error("leaf cells have no children")]
    LeafCell,

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}:{line}: expected {expected} counts, found {found}")]
    RaggedCounts { path: String, line: usize, expected: usize, found: usize },
    #[error("mixed cell levels: {0} and {1}")]
    MixedLevels(u8, u8),
    #[error("duplicate cell token {0}")]
    DuplicateToken(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for errors caused by bad inputs rather than by a failure while
    /// processing valid inputs.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_validation(),
            Error::Io(_) | Error::NonFinite(_) => false,
            _ => true,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
