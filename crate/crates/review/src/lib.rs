//! Review queue for deferred coding decisions: an append-only journal, the
//! in-memory queue it replays into, and the HTTP API over both.

mod http;
mod item;
mod queue;

use thiserror::Error;

pub use http::{bind, router, serve};
pub use item::{ReviewCandidate, ReviewItem, Status};
pub use queue::{
    Counts, EnqueueSummary, Page, ReviewQueue, Verdict, DEFAULT_PAGE_SIZE, MAX_PAGE_SIZE, UNMAPPABLE,
};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no review item `{0}`")]
    NotFound(String),
    #[error("`{0}` is already adjudicated")]
    AlreadyAdjudicated(String),
    #[error("invalid code `{code}`: {reason}")]
    InvalidCode { code: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("record `{0}` is already queued with a different payload")]
    DuplicateQueue(String),
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("cannot listen on {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("io: {0}")]
    Io(String),
}

impl ReviewError {
    /// Stable machine-readable kind, used in HTTP error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            ReviewError::NotFound(_) => "not_found",
            ReviewError::AlreadyAdjudicated(_) => "already_adjudicated",
            ReviewError::InvalidCode { .. } => "invalid_code",
            ReviewError::InvalidRequest(_) => "invalid_request",
            ReviewError::DuplicateQueue(_) => "duplicate_queue",
            ReviewError::Journal { .. } => "journal",
            ReviewError::Bind { .. } => "bind",
            ReviewError::Io(_) => "io",
        }
    }
}
