use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown station `{0}`")]
    UnknownStation(String),
    #[error("unknown edge `{0}`")]
    UnknownEdge(String),
    #[error("unknown vehicle `{0}`")]
    UnknownVehicle(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("feature schema mismatch: {0}")]
    Schema(String),
    #[error("insufficient samples: have {have}, need {need}")]
    InsufficientSamples { have: usize, need: usize },
    #[error("model has not been trained")]
    Untrained,
    #[error("duplicate: {0}")]
    Duplicate(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}
