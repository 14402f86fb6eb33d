use std::collections::{HashMap, VecDeque};
use std::pin::Pin;
use std::task::{Context, Poll};

use futures::Stream;
use parking_lot::RwLock;
use tokio::sync::mpsc;
use wasm_operator_abi::resource::{is_valid_name, EventType, TestResource, WatchEvent};

use crate::ApiError;

/// A watcher that falls this many live events behind is disconnected.
pub const DEFAULT_WATCH_BUFFER: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourceRecord {
    pub namespace: String,
    pub name: String,
    pub spec_nonce: u64,
    pub resource_version: u64,
    pub deleted: bool,
}

impl ResourceRecord {
    pub fn to_resource(&self) -> TestResource {
        TestResource::new(&self.namespace, &self.name, self.spec_nonce).with_resource_version(self.resource_version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLogEntry {
    pub resource_version: u64,
    pub event_type: EventType,
    pub record: ResourceRecord,
}

impl EventLogEntry {
    pub fn to_watch_event(&self) -> WatchEvent {
        WatchEvent { event_type: self.event_type, object: self.record.to_resource() }
    }
}

struct Watcher {
    namespace: String,
    tx: mpsc::Sender<EventLogEntry>,
}

#[derive(Default)]
struct Store {
    version: u64,
    records: HashMap<(String, String), ResourceRecord>,
    log: Vec<EventLogEntry>,
    watchers: Vec<Watcher>,
}

impl Store {
    fn append(&mut self, event_type: EventType, record: ResourceRecord) {
        let entry = EventLogEntry { resource_version: record.resource_version, event_type, record };
        // Writers never block on watchers: a full buffer disconnects the watcher.
        self.watchers.retain(|w| {
            if w.namespace != entry.record.namespace {
                return !w.tx.is_closed();
            }
            match w.tx.try_send(entry.clone()) {
                Ok(()) => true,
                Err(mpsc::error::TrySendError::Full(_)) => {
                    tracing::warn!(namespace = %w.namespace, "watcher stalled, disconnecting");
                    false
                }
                Err(mpsc::error::TrySendError::Closed(_)) => false,
            }
        });
        self.log.push(entry);
    }
}

/// In-memory TestResource store with Kubernetes-like versioning.
///
/// Every mutation bumps a single server-wide resource version and appends to an
/// append-only event log that is never compacted.
pub struct ApiServer {
    store: RwLock<Store>,
    watch_buffer: usize,
}

impl Default for ApiServer {
    fn default() -> Self {
        Self::new()
    }
}

impl ApiServer {
    pub fn new() -> Self {
        Self::with_watch_buffer(DEFAULT_WATCH_BUFFER)
    }

    pub fn with_watch_buffer(watch_buffer: usize) -> Self {
        ApiServer { store: RwLock::new(Store::default()), watch_buffer: watch_buffer.max(1) }
    }

    /// Create-or-update. Last writer wins.
    pub fn apply(&self, namespace: &str, name: &str, spec_nonce: u64) -> Result<ResourceRecord, ApiError> {
        validate(namespace, name)?;
        let mut store = self.store.write();
        store.version += 1;
        let version = store.version;
        let key = (namespace.to_owned(), name.to_owned());
        let existed = store.records.get(&key).is_some_and(|r| !r.deleted);
        let record = ResourceRecord {
            namespace: key.0.clone(),
            name: key.1.clone(),
            spec_nonce,
            resource_version: version,
            deleted: false,
        };
        store.records.insert(key, record.clone());
        let event_type = if existed { EventType::Modified } else { EventType::Added };
        store.append(event_type, record.clone());
        Ok(record)
    }

    pub fn get(&self, namespace: &str, name: &str) -> Option<ResourceRecord> {
        let store = self.store.read();
        store
            .records
            .get(&(namespace.to_owned(), name.to_owned()))
            .filter(|r| !r.deleted)
            .cloned()
    }

    /// Live records in `namespace`, ordered by name.
    pub fn list(&self, namespace: &str) -> Vec<ResourceRecord> {
        let store = self.store.read();
        let mut out: Vec<_> = store
            .records
            .values()
            .filter(|r| r.namespace == namespace && !r.deleted)
            .cloned()
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    /// Returns whether the record was present.
    pub fn delete(&self, namespace: &str, name: &str) -> bool {
        let mut store = self.store.write();
        let key = (namespace.to_owned(), name.to_owned());
        let Some(existing) = store.records.get(&key).filter(|r| !r.deleted).cloned() else {
            return false;
        };
        store.version += 1;
        let record = ResourceRecord { resource_version: store.version, deleted: true, ..existing };
        store.records.insert(key, record.clone());
        store.append(EventType::Deleted, record);
        true
    }

    /// Replays log entries of `namespace` newer than `from_version`, then
    /// streams live ones. Registration and replay happen under one lock, so
    /// nothing falls between them.
    pub fn watch(&self, namespace: &str, from_version: u64) -> WatchStream {
        let (tx, rx) = mpsc::channel(self.watch_buffer);
        let mut store = self.store.write();
        let replay: VecDeque<EventLogEntry> = store
            .log
            .iter()
            .filter(|e| e.resource_version > from_version && e.record.namespace == namespace)
            .cloned()
            .collect();
        store.watchers.push(Watcher { namespace: namespace.to_owned(), tx });
        WatchStream { replay, rx }
    }

    pub fn latest_version(&self) -> u64 {
        self.store.read().version
    }

    /// Copy of the authoritative event log.
    pub fn event_log(&self) -> Vec<EventLogEntry> {
        self.store.read().log.clone()
    }

    pub fn watcher_count(&self) -> usize {
        let mut store = self.store.write();
        store.watchers.retain(|w| !w.tx.is_closed());
        store.watchers.len()
    }
}

fn validate(namespace: &str, name: &str) -> Result<(), ApiError> {
    if !is_valid_name(namespace) {
        return Err(ApiError::InvalidName(namespace.to_owned()));
    }
    if !is_valid_name(name) {
        return Err(ApiError::InvalidName(name.to_owned()));
    }
    Ok(())
}

/// Ordered event stream for one namespace. Ends (`None`) only when the server
/// disconnected the watcher or was dropped.
pub struct WatchStream {
    replay: VecDeque<EventLogEntry>,
    rx: mpsc::Receiver<EventLogEntry>,
}

#[derive(Debug, PartialEq, Eq)]
pub enum TryNext {
    Event(EventLogEntry),
    Empty,
    Closed,
}

impl WatchStream {
    pub async fn next_event(&mut self) -> Option<EventLogEntry> {
        if let Some(e) = self.replay.pop_front() {
            return Some(e);
        }
        self.rx.recv().await
    }

    pub fn try_next(&mut self) -> TryNext {
        if let Some(e) = self.replay.pop_front() {
            return TryNext::Event(e);
        }
        match self.rx.try_recv() {
            Ok(e) => TryNext::Event(e),
            Err(mpsc::error::TryRecvError::Empty) => TryNext::Empty,
            Err(mpsc::error::TryRecvError::Disconnected) => TryNext::Closed,
        }
    }

    /// Blocking receive for non-async callers. Must not be called from within
    /// a tokio runtime.
    pub fn blocking_next(&mut self) -> Option<EventLogEntry> {
        if let Some(e) = self.replay.pop_front() {
            return Some(e);
        }
        self.rx.blocking_recv()
    }
}

impl Stream for WatchStream {
    type Item = EventLogEntry;

    fn poll_next(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<Option<Self::Item>> {
        if let Some(e) = self.replay.pop_front() {
            return Poll::Ready(Some(e));
        }
        self.rx.poll_recv(cx)
    }
}
