//! The work queue: which async ids are outstanding for which instance, plus
//! the channel completions travel on back to the event loop.

use std::collections::HashMap;

use parking_lot::Mutex;
use serde::Serialize;
use uuid::Uuid;

use crate::policy::OpKind;
use crate::runtime::Runtime;

/// One result for an outstanding operation. `payload` is an encoded envelope.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub instance: Uuid,
    pub async_id: u64,
    pub payload: Vec<u8>,
}

pub type ControlFn = Box<dyn FnOnce(&mut Runtime) + Send>;

pub enum LoopMessage {
    Completion(Completion),
    /// Runs on the event-loop thread with exclusive access to the runtime.
    Control(ControlFn),
    Shutdown,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QueueStats {
    pub live: usize,
    pub issued: u64,
    pub resolved: u64,
    /// Registrations of an id already live, or resolutions of an id that was not.
    pub violations: u64,
}

/// Thread-safe registry of live work items.
#[derive(Default)]
pub struct WorkQueue {
    inner: Mutex<QueueState>,
}

#[derive(Default)]
struct QueueState {
    live: HashMap<(Uuid, u64), OpKind>,
    stats: QueueStats,
}

impl WorkQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a new item. Returns false (and counts a violation) if the id is already live.
    pub fn register(&self, instance: Uuid, id: u64, kind: OpKind) -> bool {
        let mut s = self.inner.lock();
        if s.live.insert((instance, id), kind).is_some() {
            s.stats.violations += 1;
            return false;
        }
        s.stats.issued += 1;
        true
    }

    pub fn kind_of(&self, instance: Uuid, id: u64) -> Option<OpKind> {
        self.inner.lock().live.get(&(instance, id)).copied()
    }

    /// Marks an item finished. Resolving an id that is not live is a violation.
    pub fn resolve(&self, instance: Uuid, id: u64) -> Option<OpKind> {
        let mut s = self.inner.lock();
        match s.live.remove(&(instance, id)) {
            Some(kind) => {
                s.stats.resolved += 1;
                Some(kind)
            }
            None => {
                s.stats.violations += 1;
                None
            }
        }
    }

    /// Drops every item of an instance that will never run again. These
    /// count as resolved: no completion can be delivered for them any more.
    pub fn abandon(&self, instance: Uuid) -> usize {
        let mut s = self.inner.lock();
        let before = s.live.len();
        s.live.retain(|(i, _), _| *i != instance);
        let n = before - s.live.len();
        s.stats.resolved += n as u64;
        n
    }

    pub fn note_violation(&self) {
        self.inner.lock().stats.violations += 1;
    }

    pub fn live_for(&self, instance: Uuid) -> Vec<(u64, OpKind)> {
        let s = self.inner.lock();
        let mut v: Vec<_> = s.live.iter().filter(|((i, _), _)| *i == instance).map(|((_, id), k)| (*id, *k)).collect();
        v.sort_unstable_by_key(|(id, _)| *id);
        v
    }

    pub fn stats(&self) -> QueueStats {
        let s = self.inner.lock();
        QueueStats { live: s.live.len(), ..s.stats }
    }
}
