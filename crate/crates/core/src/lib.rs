//! Host runtime for controllers compiled to WebAssembly.
//!
//! A [`Runtime`] owns compiled modules, guest instances and the event loop
//! that feeds them completions. Idle instances can be written to disk and
//! restored on the next event. The [`workload`] module drives the synthetic
//! chain benchmark on top of it.

pub mod bridge;
pub mod cache;
mod error;
pub mod handle;
pub mod host;
mod instance;
pub mod instrument;
pub mod memory;
pub mod native;
pub mod policy;
pub mod queue;
pub mod runtime;
pub mod snapshot;
pub mod workload;

pub use bridge::{Bridge, BridgeStats, Delayed, InProcess, RemoteHttp, Transport, TransportError};
pub use cache::{CacheStats, ModuleCache, ModuleHash};
pub use error::RuntimeError;
pub use handle::RuntimeHandle;
pub use policy::{should_unload, IdleState, OpKind, UnloadMode, UnloadPolicy};
pub use queue::{Completion, LoopMessage, QueueStats, WorkQueue};
pub use runtime::{InstanceRecord, InstanceState, Metrics, Output, Runtime, RuntimeConfig, TurnOutcome};
