use std::io;
use std::path::PathBuf;

use thiserror::Error;
use uuid::Uuid;

use crate::instrument::ValidationError;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("compilation failed: {0}")]
    Compile(String),
    #[error("instantiation failed: {0}")]
    Instantiate(String),
    #[error("{what} not found")]
    NotFound { what: String },
    #[error("instance {0} is already unloaded")]
    AlreadyUnloaded(Uuid),
    #[error("instance {0} is not unloaded")]
    NotUnloaded(Uuid),
    #[error("instance {0} is not loaded")]
    NotLoaded(Uuid),
    #[error("instance {0} has failed: {1}")]
    Failed(Uuid, String),
    #[error("corrupt snapshot for {instance} at {}: {reason}", path.display())]
    CorruptSnapshot { instance: Uuid, path: PathBuf, reason: String },
    #[error("async id {id} is not pending for instance {instance}")]
    UnknownAsyncId { instance: Uuid, id: u64 },
    #[error("instance {0} has not run its first turn")]
    NotStarted(Uuid),
    #[error("{0}")]
    Unsupported(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl RuntimeError {
    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        RuntimeError::Io { context: context.into(), source }
    }

    pub(crate) fn not_found(what: impl Into<String>) -> Self {
        RuntimeError::NotFound { what: what.into() }
    }
}
