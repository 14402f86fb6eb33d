//! A minimal Kubernetes-API-semantics server for `TestResource` objects.
//!
//! The store keeps one server-wide resource version, an append-only event log
//! and per-watcher bounded buffers. It is usable in-process (see
//! [`ApiServer::handle`] and [`ApiServer::watch`]) or over HTTP through
//! [`http::spawn_http`].

pub mod http;
mod rest;
mod store;

use thiserror::Error;

pub use rest::{status_body, RestResponse};
pub use store::{ApiServer, EventLogEntry, ResourceRecord, TryNext, WatchStream, DEFAULT_WATCH_BUFFER};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApiError {
    #[error("invalid name {0:?}: must match [a-z0-9-]{{1,63}}")]
    InvalidName(String),
}
