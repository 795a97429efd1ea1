use thiserror::Error;

use crate::types::ProcessId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("hash collision: two distinct blocks map to the {bits}-bit value {value:#x}")]
    HashCollision { value: u64, bits: u32 },

    #[error("hash space of {bits} bits exhausted")]
    HashSpaceExhausted { bits: u32 },

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid tail query: {0}")]
    InvalidQuery(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("scenario schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("malformed message from {from}: {reason}")]
    Malformed { from: ProcessId, reason: String },

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    #[error("invariant violated at t={tick}: {message}")]
    Invariant { tick: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
