//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("version inactive: {0}")]
    VersionInactive(String),
    #[error("version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: String, got: String },
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("stale delta: sequence {got} not newer than last applied {last}")]
    StaleDelta { got: u64, last: u64 },
    #[error("unknown block: {0}")]
    UnknownBlock(String),
    #[error("block shape mismatch: {0}")]
    BlockShape(String),
    #[error("duplicate embedding record: request {request_id} item {item_id} version {version}")]
    DuplicateEmbedding {
        request_id: u64,
        item_id: u64,
        version: String,
    },
    #[error("backpressure: embedding log buffer full ({pending} pending)")]
    Backpressure { pending: usize },
    #[error("NE undefined: {0}")]
    NeUndefined(String),
    #[error("TR undefined: {0}")]
    TrUndefined(String),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),
    #[error("wire protocol: {0}")]
    Wire(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Wire-protocol error code for this error.
    pub fn wire_code(&self) -> &'static str {
        match self {
            Error::VersionInactive(_) => "VERSION_INACTIVE",
            Error::VersionMismatch { .. } => "VERSION_MISMATCH",
            Error::BadRequest(_) | Error::Wire(_) => "BAD_REQUEST",
            Error::StaleDelta { .. } => "STALE_DELTA",
            Error::UnknownBlock(_) => "UNKNOWN_BLOCK",
            Error::Backpressure { .. } => "BACKPRESSURE",
            _ => "INTERNAL",
        }
    }
}
