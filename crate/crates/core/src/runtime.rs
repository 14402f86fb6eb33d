//! The parent event loop: instance records, turns, unloading and reloading.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use serde::Serialize;
use uuid::Uuid;
use wasm_operator_abi::resource::WatchEvent;
use wasm_operator_abi::{Envelope, Kind, Method};
use wasmtime::{Config, Engine, Linker};

use crate::bridge::{Bridge, BridgeStats, Transport};
use crate::cache::{CacheStats, ModuleCache, ModuleHash};
use crate::error::RuntimeError;
use crate::host::{self, HostCall, HostState};
use crate::instance::{CallError, WasmInstance};
use crate::native::{NativeInstance, NativeProgram};
use crate::policy::{should_unload, IdleState, OpKind, UnloadMode, UnloadPolicy};
use crate::queue::{Completion, LoopMessage, QueueStats, WorkQueue};
use crate::snapshot::{self, SnapshotError, SnapshotHeader};

/// Granularity of the watchdog clock.
const EPOCH_TICK: Duration = Duration::from_millis(10);
/// Most messages taken from the channel per loop iteration. Also bounds
/// how many events can be coalesced for an unloaded instance at once.
pub const MAX_BATCH: usize = 1024;

#[derive(Debug, Clone)]
pub struct RuntimeConfig {
    pub cache_dir: PathBuf,
    pub snapshot_dir: PathBuf,
    pub policy: UnloadPolicy,
    /// Wall-clock budget per turn; a turn running longer traps.
    pub watchdog: Option<Duration>,
    pub compress_snapshots: bool,
    /// Keep every host call and log line per instance for inspection.
    pub capture_outputs: bool,
}

impl RuntimeConfig {
    pub fn new(cache_dir: impl Into<PathBuf>, snapshot_dir: impl Into<PathBuf>) -> Self {
        RuntimeConfig {
            cache_dir: cache_dir.into(),
            snapshot_dir: snapshot_dir.into(),
            policy: UnloadPolicy::never(),
            watchdog: Some(Duration::from_secs(10)),
            compress_snapshots: false,
            capture_outputs: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceState {
    Loaded,
    Unloaded,
    /// Quarantined after a trap or failed reload. Never runs again.
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct InstanceCounters {
    pub turns: u64,
    pub unloads: u64,
    pub reloads: u64,
    pub bytes_swapped: u64,
    pub traps: u64,
    pub unload_nanos: u64,
    pub reload_nanos: u64,
}

#[derive(Debug, Clone)]
pub struct InstanceRecord {
    pub instance_id: Uuid,
    /// `None` for native instances.
    pub module_hash: Option<ModuleHash>,
    pub state: InstanceState,
    pub pending: BTreeMap<u64, OpKind>,
    pub last_completion_at: Instant,
    pub snapshot_path: Option<PathBuf>,
    pub started: bool,
    /// Next async id the host hands to this instance.
    pub next_id: u64,
    pub counters: InstanceCounters,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TurnOutcome {
    Yielded(usize),
    Finished,
    Trapped(String),
}

/// Observable guest behaviour, recorded when `capture_outputs` is set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Call(HostCall),
    Log(String),
}

enum Body {
    Wasm(Box<WasmInstance>),
    Native(Box<NativeInstance>),
    Swapped,
    Gone,
}

struct Entry {
    record: InstanceRecord,
    config: Vec<u8>,
    body: Body,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceMetrics {
    pub id: Uuid,
    pub module: Option<String>,
    pub state: InstanceState,
    pub started: bool,
    pub pending: usize,
    #[serde(flatten)]
    pub counters: InstanceCounters,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub instances: Vec<InstanceMetrics>,
    pub finished: u64,
    pub failed: u64,
    pub turns: u64,
    pub dropped_completions: u64,
    /// Watch events superseded by a newer event for the same resource while
    /// their instance was unloaded.
    pub coalesced_events: u64,
    pub cache: CacheStats,
    pub queue: QueueStats,
    pub bridge: Option<BridgeStats>,
}

/// Advances the engine epoch so turns past their budget trap.
struct EpochTicker {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl EpochTicker {
    fn start(engine: Engine) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let thread = std::thread::Builder::new()
            .name("wop-epoch".into())
            .spawn(move || {
                while !flag.load(Ordering::Relaxed) {
                    std::thread::sleep(EPOCH_TICK);
                    engine.increment_epoch();
                }
            })
            .expect("spawning epoch thread");
        EpochTicker { stop, thread: Some(thread) }
    }
}

impl Drop for EpochTicker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub struct Runtime {
    config: RuntimeConfig,
    engine: Engine,
    linker: Linker<HostState>,
    cache: ModuleCache,
    instances: BTreeMap<Uuid, Entry>,
    unstarted: Vec<Uuid>,
    queue: Arc<WorkQueue>,
    bridge: Option<Bridge>,
    tx: Sender<LoopMessage>,
    rx: Receiver<LoopMessage>,
    epoch: Instant,
    watchdog_ticks: Option<u64>,
    _ticker: Option<EpochTicker>,
    outputs: HashMap<Uuid, Vec<Output>>,
    finished: u64,
    failed: u64,
    turns: u64,
    dropped_completions: u64,
    coalesced_events: u64,
}

impl Runtime {
    /// Without a transport, host calls are only recorded; completions must
    /// then be supplied by the caller through [`run_turn`](Self::run_turn).
    pub fn new(config: RuntimeConfig, transport: Option<Arc<dyn Transport>>) -> Result<Self, RuntimeError> {
        let mut wasm_config = Config::new();
        wasm_config.epoch_interruption(config.watchdog.is_some());
        let engine = Engine::new(&wasm_config).map_err(|e| RuntimeError::Compile(format!("engine setup: {e:#}")))?;
        let mut linker = Linker::new(&engine);
        host::add_to_linker(&mut linker).map_err(|e| RuntimeError::Compile(format!("linking host functions: {e:#}")))?;
        let cache = ModuleCache::new(engine.clone(), &config.cache_dir)?;
        std::fs::create_dir_all(&config.snapshot_dir)
            .map_err(|e| RuntimeError::io(format!("creating {}", config.snapshot_dir.display()), e))?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let bridge = match transport {
            Some(t) => Some(Bridge::new(t, tx.clone()).map_err(|e| RuntimeError::io("starting bridge runtime", e))?),
            None => None,
        };
        let watchdog_ticks = config
            .watchdog
            .map(|d| (d.as_millis() / EPOCH_TICK.as_millis()).max(1) as u64);
        let ticker = config.watchdog.map(|_| EpochTicker::start(engine.clone()));
        Ok(Runtime {
            config,
            engine,
            linker,
            cache,
            instances: BTreeMap::new(),
            unstarted: Vec::new(),
            queue: Arc::new(WorkQueue::new()),
            bridge,
            tx,
            rx,
            epoch: Instant::now(),
            watchdog_ticks,
            _ticker: ticker,
            outputs: HashMap::new(),
            finished: 0,
            failed: 0,
            turns: 0,
            dropped_completions: 0,
            coalesced_events: 0,
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn set_policy(&mut self, policy: UnloadPolicy) {
        self.config.policy = policy;
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn cache(&self) -> &ModuleCache {
        &self.cache
    }

    pub fn queue(&self) -> &WorkQueue {
        &self.queue
    }

    pub fn bridge(&self) -> Option<&Bridge> {
        self.bridge.as_ref()
    }

    /// Sender for completions and control messages into this loop.
    pub fn sender(&self) -> Sender<LoopMessage> {
        self.tx.clone()
    }

    pub fn compile_and_cache(&mut self, bytes: &[u8]) -> Result<ModuleHash, RuntimeError> {
        self.cache.compile_and_cache(bytes)
    }

    fn new_record(id: Uuid, module_hash: Option<ModuleHash>) -> InstanceRecord {
        InstanceRecord {
            instance_id: id,
            module_hash,
            state: InstanceState::Loaded,
            pending: BTreeMap::new(),
            last_completion_at: Instant::now(),
            snapshot_path: None,
            started: false,
            next_id: 1,
            counters: InstanceCounters::default(),
            failure: None,
        }
    }

    /// Instantiates a cached module. `start` runs on the first turn.
    pub fn spawn(&mut self, hash: &ModuleHash, config: &[u8]) -> Result<Uuid, RuntimeError> {
        let compiled = self.cache.get(hash).ok_or_else(|| RuntimeError::not_found(format!("module {hash}")))?;
        let wasm = WasmInstance::instantiate(&self.engine, &self.linker, &compiled, 1, self.epoch, self.watchdog_ticks)
            .map_err(RuntimeError::Instantiate)?;
        let id = Uuid::new_v4();
        self.instances.insert(
            id,
            Entry { record: Self::new_record(id, Some(*hash)), config: config.to_vec(), body: Body::Wasm(Box::new(wasm)) },
        );
        self.unstarted.push(id);
        Ok(id)
    }

    /// Registers a native (non-isolated) guest program.
    pub fn spawn_native(&mut self, program: NativeProgram, config: &[u8]) -> Uuid {
        let id = Uuid::new_v4();
        self.instances.insert(
            id,
            Entry {
                record: Self::new_record(id, None),
                config: config.to_vec(),
                body: Body::Native(Box::new(NativeInstance::new(program, 1))),
            },
        );
        self.unstarted.push(id);
        id
    }

    pub fn record(&self, id: Uuid) -> Option<&InstanceRecord> {
        self.instances.get(&id).map(|e| &e.record)
    }

    pub fn records(&self) -> impl Iterator<Item = &InstanceRecord> {
        self.instances.values().map(|e| &e.record)
    }

    pub fn instance_ids(&self) -> Vec<Uuid> {
        self.instances.keys().copied().collect()
    }

    /// Instances that can still run (not failed).
    pub fn live_count(&self) -> usize {
        self.instances.values().filter(|e| e.record.state != InstanceState::Failed).count()
    }

    pub fn take_outputs(&mut self, id: Uuid) -> Vec<Output> {
        self.outputs.remove(&id).unwrap_or_default()
    }

    /// Copy of a loaded wasm instance's linear memory.
    pub fn memory_image(&self, id: Uuid) -> Option<Vec<u8>> {
        match &self.instances.get(&id)?.body {
            Body::Wasm(w) => Some(w.memory_bytes().to_vec()),
            _ => None,
        }
    }

    pub fn run_turn(&mut self, id: Uuid, completion: Option<(u64, Vec<u8>)>) -> Result<TurnOutcome, RuntimeError> {
        let entry = self.instances.get_mut(&id).ok_or_else(|| RuntimeError::not_found(format!("instance {id}")))?;
        match entry.record.state {
            InstanceState::Failed => {
                return Err(RuntimeError::Failed(id, entry.record.failure.clone().unwrap_or_default()))
            }
            InstanceState::Unloaded => return Err(RuntimeError::NotLoaded(id)),
            InstanceState::Loaded => {}
        }
        let result = match completion {
            None => {
                if entry.record.started {
                    return Err(RuntimeError::Unsupported(format!("instance {id} already started; a completion is required")));
                }
                entry.record.started = true;
                self.unstarted.retain(|u| *u != id);
                match &mut entry.body {
                    Body::Wasm(w) => w.run_start(&entry.config),
                    Body::Native(n) => n.run_start(&entry.config).map_err(CallError::Trap),
                    Body::Swapped | Body::Gone => unreachable!("loaded instance has a body"),
                }
            }
            Some((async_id, payload)) => {
                if !entry.record.started {
                    return Err(RuntimeError::NotStarted(id));
                }
                let Some(&kind) = entry.record.pending.get(&async_id) else {
                    self.queue.note_violation();
                    return Err(RuntimeError::UnknownAsyncId { instance: id, id: async_id });
                };
                let terminal = !kind.is_stream() || payload.get(1) == Some(&(Kind::StreamClosed as u8));
                if terminal {
                    entry.record.pending.remove(&async_id);
                    self.queue.resolve(id, async_id);
                }
                entry.record.last_completion_at = Instant::now();
                match &mut entry.body {
                    Body::Wasm(w) => w.run_wakeup(async_id, &payload),
                    Body::Native(n) => n.run_wakeup(async_id, &payload).map_err(CallError::Trap),
                    Body::Swapped | Body::Gone => unreachable!("loaded instance has a body"),
                }
            }
        };

        let (calls, logs, next_id) = match &mut entry.body {
            Body::Wasm(w) => {
                let host = w.host();
                host.flush_output();
                (std::mem::take(&mut host.calls), std::mem::take(&mut host.logs), host.next_id)
            }
            Body::Native(n) => {
                let (calls, logs) = n.drain();
                (calls, logs, n.next_id())
            }
            Body::Swapped | Body::Gone => unreachable!(),
        };
        entry.record.next_id = next_id;
        entry.record.counters.turns += 1;
        self.turns += 1;

        for line in &logs {
            tracing::info!(instance = %id, "{line}");
        }
        let capture = self.config.capture_outputs;
        if capture {
            self.outputs.entry(id).or_default().extend(logs.into_iter().map(Output::Log));
        }

        let reason = match result {
            Ok(()) => None,
            Err(CallError::Exit(0)) => {
                self.remove_finished(id);
                return Ok(TurnOutcome::Finished);
            }
            Err(CallError::Exit(code)) => Some(format!("exit code {code}")),
            Err(CallError::Trap(reason)) => Some(reason),
        };
        if let Some(reason) = reason {
            tracing::warn!(instance = %id, "guest trapped: {reason}");
            self.quarantine(id, reason.clone());
            return Ok(TurnOutcome::Trapped(reason));
        }

        for call in calls {
            let async_id = call.id();
            let kind = match &call {
                HostCall::Request { envelope, .. } if envelope.method == Method::Watch => OpKind::Watch,
                HostCall::Request { .. } | HostCall::Malformed { .. } => OpKind::Request,
                HostCall::Delay { .. } => OpKind::Timer,
            };
            self.queue.register(id, async_id, kind);
            entry.record.pending.insert(async_id, kind);
            if capture {
                self.outputs.entry(id).or_default().push(Output::Call(call.clone()));
            }
            if let Some(bridge) = &self.bridge {
                match call {
                    HostCall::Request { envelope, .. } => bridge.submit(id, async_id, envelope),
                    HostCall::Malformed { reason, .. } => bridge.reject(id, async_id, &reason),
                    HostCall::Delay { millis, .. } => bridge.submit_timer(id, async_id, millis),
                }
            }
        }

        let pending = entry.record.pending.len();
        if pending == 0 {
            self.remove_finished(id);
            return Ok(TurnOutcome::Finished);
        }
        Ok(TurnOutcome::Yielded(pending))
    }

    fn remove_finished(&mut self, id: Uuid) {
        if let Some(bridge) = &self.bridge {
            bridge.cancel_streams(id);
        }
        self.queue.abandon(id);
        self.instances.remove(&id);
        self.finished += 1;
    }

    fn quarantine(&mut self, id: Uuid, reason: String) {
        let Some(entry) = self.instances.get_mut(&id) else { return };
        entry.record.state = InstanceState::Failed;
        entry.record.failure = Some(reason);
        entry.record.counters.traps += 1;
        entry.record.pending.clear();
        entry.body = Body::Gone;
        self.unstarted.retain(|u| *u != id);
        self.queue.abandon(id);
        if let Some(bridge) = &self.bridge {
            bridge.cancel_streams(id);
        }
        self.failed += 1;
    }

    pub fn snapshot_path_for(&self, id: Uuid) -> PathBuf {
        self.config.snapshot_dir.join(format!("{id}.wops"))
    }

    /// Writes the instance to disk and releases its engine resources.
    pub fn unload(&mut self, id: Uuid) -> Result<PathBuf, RuntimeError> {
        let path = self.snapshot_path_for(id);
        let compress = self.config.compress_snapshots;
        let entry = self.instances.get_mut(&id).ok_or_else(|| RuntimeError::not_found(format!("instance {id}")))?;
        match entry.record.state {
            InstanceState::Unloaded => return Err(RuntimeError::AlreadyUnloaded(id)),
            InstanceState::Failed => {
                return Err(RuntimeError::Failed(id, entry.record.failure.clone().unwrap_or_default()))
            }
            InstanceState::Loaded => {}
        }
        let Body::Wasm(wasm) = &mut entry.body else {
            return Err(RuntimeError::Unsupported(format!("instance {id} is native and cannot be unloaded")));
        };
        let started = Instant::now();
        let header = SnapshotHeader {
            instance_id: id,
            module_hash: entry.record.module_hash.expect("wasm instances have a module").0,
            memory_pages: wasm.memory_pages(),
            globals: wasm.global_values(),
            pending: entry.record.pending.keys().copied().collect(),
        };
        let written = snapshot::write_file(&path, &header, wasm.memory_bytes(), compress)
            .map_err(|e| RuntimeError::io(format!("writing snapshot {}", path.display()), e))?;
        entry.body = Body::Swapped;
        entry.record.state = InstanceState::Unloaded;
        entry.record.snapshot_path = Some(path.clone());
        let c = &mut entry.record.counters;
        c.unloads += 1;
        c.bytes_swapped += written;
        c.unload_nanos += started.elapsed().as_nanos() as u64;
        Ok(path)
    }

    /// Restores an unloaded instance from its snapshot file.
    pub fn reload(&mut self, id: Uuid) -> Result<(), RuntimeError> {
        let entry = self.instances.get(&id).ok_or_else(|| RuntimeError::not_found(format!("instance {id}")))?;
        match entry.record.state {
            InstanceState::Loaded => return Err(RuntimeError::NotUnloaded(id)),
            InstanceState::Failed => {
                return Err(RuntimeError::Failed(id, entry.record.failure.clone().unwrap_or_default()))
            }
            InstanceState::Unloaded => {}
        }
        let started = Instant::now();
        let path = entry.record.snapshot_path.clone().expect("unloaded instances have a snapshot");
        let hash = entry.record.module_hash.expect("only wasm instances unload");
        let expected_pending: Vec<u64> = entry.record.pending.keys().copied().collect();
        let next_id = entry.record.next_id;

        let corrupt = |this: &mut Self, reason: String| {
            this.quarantine(id, format!("reload failed: {reason}"));
            RuntimeError::CorruptSnapshot { instance: id, path: path.clone(), reason }
        };
        let snap = match snapshot::read_file(&path) {
            Ok(s) => s,
            Err(SnapshotError::Corrupt(reason)) => return Err(corrupt(self, reason)),
            Err(SnapshotError::Io(e)) => {
                self.quarantine(id, format!("reload failed: {e}"));
                return Err(RuntimeError::io(format!("reading snapshot {}", path.display()), e));
            }
        };
        if snap.header.instance_id != id {
            return Err(corrupt(self, format!("snapshot belongs to instance {}", snap.header.instance_id)));
        }
        if snap.header.module_hash != hash.0 {
            return Err(corrupt(self, "snapshot was taken from a different module".into()));
        }
        if snap.header.pending != expected_pending {
            return Err(corrupt(self, "pending ids differ from the work queue".into()));
        }
        let compiled = self.cache.get(&hash).ok_or_else(|| RuntimeError::not_found(format!("module {hash}")))?;
        let mut wasm =
            match WasmInstance::instantiate(&self.engine, &self.linker, &compiled, next_id, self.epoch, self.watchdog_ticks) {
                Ok(w) => w,
                Err(e) => {
                    self.quarantine(id, format!("reload failed: {e}"));
                    return Err(RuntimeError::Instantiate(e));
                }
            };
        if let Err(reason) = wasm.restore(&snap) {
            return Err(corrupt(self, reason));
        }
        drop(snap);
        if let Err(e) = std::fs::remove_file(&path) {
            tracing::warn!(instance = %id, "could not remove snapshot {}: {e}", path.display());
        }
        let entry = self.instances.get_mut(&id).expect("checked above");
        entry.body = Body::Wasm(Box::new(wasm));
        entry.record.state = InstanceState::Loaded;
        entry.record.snapshot_path = None;
        entry.record.counters.reloads += 1;
        entry.record.counters.reload_nanos += started.elapsed().as_nanos() as u64;
        Ok(())
    }

    /// Unloads every loaded wasm instance. Native instances are skipped.
    pub fn snapshot_all(&mut self) -> Vec<(Uuid, Result<PathBuf, RuntimeError>)> {
        let ids: Vec<Uuid> = self
            .instances
            .iter()
            .filter(|(_, e)| e.record.state == InstanceState::Loaded && matches!(e.body, Body::Wasm(_)))
            .map(|(id, _)| *id)
            .collect();
        ids.into_iter().map(|id| (id, self.unload(id))).collect()
    }

    /// Runs the event loop until `deadline` passes or no instances remain.
    /// Returns the number of turns executed.
    pub fn pump(&mut self, deadline: Option<Duration>) -> usize {
        self.run_loop(deadline.map(|d| Instant::now() + d), true)
    }

    /// Runs the event loop until a [`LoopMessage::Shutdown`] arrives.
    pub fn serve(&mut self) -> usize {
        self.run_loop(None, false)
    }

    fn idle_tick(&self) -> Duration {
        match self.config.policy.mode {
            UnloadMode::IdleTimeout => (self.config.policy.idle_timeout / 4).clamp(Duration::from_millis(1), Duration::from_secs(1)),
            _ => Duration::from_secs(1),
        }
    }

    fn run_loop(&mut self, deadline: Option<Instant>, stop_when_empty: bool) -> usize {
        let mut turns = 0;
        let mut next_check = Instant::now() + self.idle_tick();
        loop {
            turns += self.start_unstarted();
            if stop_when_empty && self.live_count() == 0 {
                return turns;
            }
            let now = Instant::now();
            if deadline.is_some_and(|d| now >= d) {
                return turns;
            }
            let mut wait = next_check.saturating_duration_since(now);
            if let Some(d) = deadline {
                wait = wait.min(d - now);
            }
            match self.rx.recv_timeout(wait) {
                Ok(first) => {
                    let mut batch = vec![first];
                    batch.extend(self.rx.try_iter().take(MAX_BATCH - 1));
                    let (n, shutdown) = self.process_batch(batch);
                    turns += n;
                    if shutdown {
                        return turns;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("the runtime holds a sender"),
            }
            let now = Instant::now();
            if now >= next_check {
                self.apply_idle_policy(now);
                next_check = now + self.idle_tick();
            }
        }
    }

    fn start_unstarted(&mut self) -> usize {
        let mut turns = 0;
        for id in std::mem::take(&mut self.unstarted) {
            let Some(entry) = self.instances.get(&id) else { continue };
            if entry.record.started || entry.record.state == InstanceState::Failed {
                continue;
            }
            if entry.record.state == InstanceState::Unloaded {
                if let Err(e) = self.reload(id) {
                    tracing::error!(instance = %id, "reload before start failed: {e}");
                    continue;
                }
            }
            match self.run_turn(id, None) {
                Ok(_) => turns += 1,
                Err(e) => tracing::error!(instance = %id, "start failed: {e}"),
            }
            self.after_turns(id);
        }
        turns
    }

    fn process_batch(&mut self, batch: Vec<LoopMessage>) -> (usize, bool) {
        let mut groups: Vec<(Uuid, Vec<(u64, Vec<u8>)>)> = Vec::new();
        let mut index: HashMap<Uuid, usize> = HashMap::new();
        let mut controls = Vec::new();
        let mut shutdown = false;
        for msg in batch {
            match msg {
                LoopMessage::Completion(Completion { instance, async_id, payload }) => {
                    let slot = *index.entry(instance).or_insert_with(|| {
                        groups.push((instance, Vec::new()));
                        groups.len() - 1
                    });
                    groups[slot].1.push((async_id, payload));
                }
                LoopMessage::Control(f) => controls.push(f),
                LoopMessage::Shutdown => shutdown = true,
            }
        }
        let mut turns = 0;
        for (id, items) in groups {
            turns += self.deliver(id, items);
        }
        for f in controls {
            f(self);
        }
        (turns, shutdown)
    }

    /// Hands a batch of completions to one instance, reloading it first if
    /// it was swapped out.
    fn deliver(&mut self, id: Uuid, mut items: Vec<(u64, Vec<u8>)>) -> usize {
        let state = match self.instances.get(&id) {
            Some(e) => e.record.state,
            None => {
                self.dropped_completions += items.len() as u64;
                return 0;
            }
        };
        match state {
            InstanceState::Failed => {
                self.dropped_completions += items.len() as u64;
                return 0;
            }
            InstanceState::Unloaded => {
                let pending = &self.instances[&id].record.pending;
                let before = items.len();
                items = coalesce_watch_events(items, |aid| pending.get(&aid).copied());
                self.coalesced_events += (before - items.len()) as u64;
                if let Err(e) = self.reload(id) {
                    tracing::error!(instance = %id, "{e}");
                    self.dropped_completions += items.len() as u64;
                    return 0;
                }
            }
            InstanceState::Loaded => {}
        }
        let mut turns = 0;
        let mut items = items.into_iter();
        for (async_id, payload) in items.by_ref() {
            match self.run_turn(id, Some((async_id, payload))) {
                Ok(TurnOutcome::Yielded(_)) => turns += 1,
                Ok(TurnOutcome::Finished | TurnOutcome::Trapped(_)) => {
                    turns += 1;
                    break;
                }
                Err(e @ RuntimeError::UnknownAsyncId { .. }) => {
                    tracing::warn!("{e}");
                    self.dropped_completions += 1;
                }
                Err(e) => {
                    tracing::error!(instance = %id, "{e}");
                    self.dropped_completions += 1;
                    break;
                }
            }
        }
        self.dropped_completions += items.count() as u64;
        self.after_turns(id);
        turns
    }

    fn after_turns(&mut self, id: Uuid) {
        if self.config.policy.mode != UnloadMode::EveryTurn {
            return;
        }
        let unloadable = self
            .instances
            .get(&id)
            .is_some_and(|e| e.record.state == InstanceState::Loaded && matches!(e.body, Body::Wasm(_)));
        if unloadable {
            if let Err(e) = self.unload(id) {
                tracing::error!(instance = %id, "unload failed: {e}");
            }
        }
    }

    fn apply_idle_policy(&mut self, now: Instant) {
        if self.config.policy.mode == UnloadMode::Never {
            return;
        }
        let due: Vec<Uuid> = self
            .instances
            .iter()
            .filter(|(_, e)| {
                e.record.state == InstanceState::Loaded && e.record.started && matches!(e.body, Body::Wasm(_)) && {
                    let idle = IdleState::from_pending(e.record.last_completion_at, e.record.pending.values());
                    should_unload(&idle, &self.config.policy, now)
                }
            })
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            if let Err(e) = self.unload(id) {
                tracing::error!(instance = %id, "idle unload failed: {e}");
            }
        }
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            instances: self
                .instances
                .values()
                .map(|e| InstanceMetrics {
                    id: e.record.instance_id,
                    module: e.record.module_hash.map(|h| h.to_hex()),
                    state: e.record.state,
                    started: e.record.started,
                    pending: e.record.pending.len(),
                    counters: e.record.counters,
                    failure: e.record.failure.clone(),
                })
                .collect(),
            finished: self.finished,
            failed: self.failed,
            turns: self.turns,
            dropped_completions: self.dropped_completions,
            coalesced_events: self.coalesced_events,
            cache: self.cache.stats(),
            queue: self.queue.stats(),
            bridge: self.bridge.as_ref().map(Bridge::stats),
        }
    }

    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics()).expect("metrics serialize")
    }
}

/// Keeps only the latest watch event per (stream, resource) among buffered
/// completions. Other completions and their relative order are untouched.
pub fn coalesce_watch_events(
    items: Vec<(u64, Vec<u8>)>,
    kind_of: impl Fn(u64) -> Option<OpKind>,
) -> Vec<(u64, Vec<u8>)> {
    let key = |aid: u64, payload: &[u8]| -> Option<(u64, String, String)> {
        if kind_of(aid) != Some(OpKind::Watch) {
            return None;
        }
        let env = Envelope::decode(payload).ok()?;
        if env.kind != Kind::WatchEvent {
            return None;
        }
        let event = WatchEvent::from_json(&env.body).ok()?;
        Some((aid, event.object.metadata.namespace, event.object.metadata.name))
    };
    let mut latest: HashMap<(u64, String, String), usize> = HashMap::new();
    let mut slots: Vec<Option<(u64, Vec<u8>)>> = Vec::with_capacity(items.len());
    for (aid, payload) in items {
        if let Some(k) = key(aid, &payload) {
            if let Some(prev) = latest.insert(k, slots.len()) {
                slots[prev] = None;
            }
        }
        slots.push(Some((aid, payload)));
    }
    slots.into_iter().flatten().collect()
}
