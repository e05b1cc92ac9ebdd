//! Error types shared across the middleware, storage and harness layers.

use crate::keyspace::{Guid, Key, Pid};
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("not found")]
    NotFound,
    #[error("entry has the wrong kind for this operation")]
    WrongKind,
    #[error("operation not available under the configured data store strategy")]
    StrategyMismatch,
    #[error("content hash of data does not match pid {0}")]
    IntegrityError(Pid),
    #[error("class binding for {0} is immutable and already set")]
    ImmutableViolation(Guid),
    #[error("encoding error: {0}")]
    EncodingError(String),
    #[error("decode error: {0}")]
    DecodeError(String),
    #[error("unresolvable child {0} during closure traversal")]
    ResolutionError(Guid),
    #[error("reference {0} cannot be resolved")]
    Unresolvable(Guid),
    #[error("version {0} is known but its data is gone")]
    DataLoss(Pid),
    #[error("commit aborted by resilience policy")]
    CommitAborted,
    #[error("schema error: {0}")]
    SchemaError(String),
    #[error("message to node {0} could not be delivered")]
    DeliveryFailure(Key),
    #[error("no live node in the ring")]
    EmptyRing,
    #[error("node {0} is already live")]
    DuplicateNode(Key),
    #[error("node {0} is not live")]
    NodeNotLive(Key),
    #[error("unknown node index {0}")]
    UnknownNode(usize),
    #[error("refusing to fail the last live node")]
    LastNode,
    #[error("freshly generated GUID collides with an allocated one")]
    GuidCollision,
    #[error("simulated crash of node {0}")]
    Crashed(Key),
    #[error("duplicate policy name {0}")]
    DuplicatePolicy(String),
    #[error("unknown policy {0}")]
    UnknownPolicy(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
