//! A live wasm instance: store, exports and the snapshot capture/restore.

use std::sync::Arc;
use std::time::Instant;

use wasm_operator_abi::names;
use wasmtime::{Engine, Global, Linker, Memory, Store, Trap, TypedFunc, Val};

use crate::cache::CompiledModule;
use crate::host::{HostState, ProcExit};
use crate::instrument::{GLOBAL_EXPORT_PREFIX, MEMORY_EXPORT};
use crate::snapshot::{GlobalValue, Snapshot, PAGE_SIZE};

/// How a guest call ended abnormally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    Trap(String),
    Exit(i32),
}

pub struct WasmInstance {
    store: Store<HostState>,
    memory: Memory,
    globals: Vec<(u32, Global)>,
    start: TypedFunc<(), ()>,
    allocate: TypedFunc<i32, i32>,
    wakeup: TypedFunc<(i64, i32, i32), ()>,
    config: Option<TypedFunc<(i32, i32), ()>>,
    watchdog_ticks: Option<u64>,
}

/// Short, stable description of a trap.
fn describe(err: wasmtime::Error) -> CallError {
    if let Some(exit) = err.downcast_ref::<ProcExit>() {
        return CallError::Exit(exit.0);
    }
    match err.downcast_ref::<Trap>() {
        Some(Trap::UnreachableCodeReached) => CallError::Trap("unreachable".into()),
        Some(Trap::MemoryOutOfBounds) => CallError::Trap("out of bounds memory access".into()),
        Some(Trap::Interrupt) => CallError::Trap("watchdog: turn exceeded its time budget".into()),
        Some(Trap::StackOverflow) => CallError::Trap("stack overflow".into()),
        Some(other) => CallError::Trap(other.to_string()),
        None => CallError::Trap(format!("{err:#}")),
    }
}

impl WasmInstance {
    pub fn instantiate(
        engine: &Engine,
        linker: &Linker<HostState>,
        compiled: &Arc<CompiledModule>,
        next_id: u64,
        epoch: Instant,
        watchdog_ticks: Option<u64>,
    ) -> Result<Self, String> {
        let mut store = Store::new(engine, HostState::new(next_id, epoch));
        if let Some(ticks) = watchdog_ticks {
            store.set_epoch_deadline(ticks);
        }
        let instance = linker.instantiate(&mut store, &compiled.module).map_err(|e| format!("{e:#}"))?;
        let memory = instance.get_memory(&mut store, MEMORY_EXPORT).ok_or("memory export missing")?;
        let mut globals = Vec::with_capacity(compiled.mutable_globals.len());
        for &index in &compiled.mutable_globals {
            let g = instance
                .get_global(&mut store, &format!("{GLOBAL_EXPORT_PREFIX}{index}"))
                .ok_or_else(|| format!("global {index} export missing"))?;
            globals.push((index, g));
        }
        let func = |store: &mut Store<HostState>, name: &str| {
            instance.get_func(&mut *store, name).ok_or_else(|| format!("export {name} missing"))
        };
        let start = func(&mut store, names::EXPORT_START)?.typed(&store).map_err(|e| e.to_string())?;
        let allocate = func(&mut store, names::EXPORT_ALLOCATE)?.typed(&store).map_err(|e| e.to_string())?;
        let wakeup = func(&mut store, names::EXPORT_WAKEUP)?.typed(&store).map_err(|e| e.to_string())?;
        let config = if compiled.has_config {
            Some(func(&mut store, names::EXPORT_CONFIG)?.typed(&store).map_err(|e| e.to_string())?)
        } else {
            None
        };
        Ok(WasmInstance { store, memory, globals, start, allocate, wakeup, config, watchdog_ticks })
    }

    pub fn host(&mut self) -> &mut HostState {
        self.store.data_mut()
    }

    fn arm_watchdog(&mut self) {
        if let Some(ticks) = self.watchdog_ticks {
            self.store.set_epoch_deadline(ticks);
        }
    }

    /// Copies `bytes` into a guest-allocated buffer.
    fn push_bytes(&mut self, bytes: &[u8]) -> Result<(i32, i32), CallError> {
        let len = i32::try_from(bytes.len()).map_err(|_| CallError::Trap("payload exceeds 2 GiB".into()))?;
        let ptr = self.allocate.call(&mut self.store, len).map_err(describe)?;
        let start = ptr as u32 as usize;
        let dst = self
            .memory
            .data_mut(&mut self.store)
            .get_mut(start..start + bytes.len())
            .ok_or_else(|| CallError::Trap(format!("allocate returned out-of-bounds buffer {start}+{len}")))?;
        dst.copy_from_slice(bytes);
        Ok((ptr, len))
    }

    /// First turn: optional config call, then `start`.
    pub fn run_start(&mut self, config: &[u8]) -> Result<(), CallError> {
        self.arm_watchdog();
        if let Some(cfg) = self.config.clone() {
            let (ptr, len) = self.push_bytes(config)?;
            cfg.call(&mut self.store, (ptr, len)).map_err(describe)?;
        }
        self.start.call(&mut self.store, ()).map_err(describe)
    }

    pub fn run_wakeup(&mut self, id: u64, payload: &[u8]) -> Result<(), CallError> {
        self.arm_watchdog();
        let (ptr, len) = self.push_bytes(payload)?;
        self.wakeup.call(&mut self.store, (id as i64, ptr, len)).map_err(describe)
    }

    pub fn memory_pages(&self) -> u32 {
        (self.memory.data_size(&self.store) / PAGE_SIZE) as u32
    }

    pub fn memory_bytes(&self) -> &[u8] {
        self.memory.data(&self.store)
    }

    pub fn global_values(&mut self) -> Vec<(u32, GlobalValue)> {
        self.globals
            .iter()
            .map(|&(index, g)| {
                let v = match g.get(&mut self.store) {
                    Val::I32(v) => GlobalValue::I32(v),
                    Val::I64(v) => GlobalValue::I64(v),
                    Val::F32(v) => GlobalValue::F32(v),
                    Val::F64(v) => GlobalValue::F64(v),
                    other => unreachable!("validation admits numeric globals only, got {other:?}"),
                };
                (index, v)
            })
            .collect()
    }

    /// Makes memory and globals equal to the snapshot. Only 4 KiB chunks that
    /// differ from the fresh instance are written, so untouched pages stay
    /// shared with the module image.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<(), String> {
        let have = self.memory_pages() as u64;
        let want = u64::from(snapshot.header.memory_pages);
        if want < have {
            return Err(format!("snapshot has {want} pages, fresh instance already has {have}"));
        }
        if want > have {
            self.memory.grow(&mut self.store, want - have).map_err(|e| format!("memory.grow: {e:#}"))?;
        }
        let dst = self.memory.data_mut(&mut self.store);
        const CHUNK: usize = 4096;
        for (d, s) in dst.chunks_mut(CHUNK).zip(snapshot.memory.chunks(CHUNK)) {
            if d != s {
                d.copy_from_slice(s);
            }
        }
        for &(index, value) in &snapshot.header.globals {
            let global = self
                .globals
                .iter()
                .find(|(i, _)| *i == index)
                .map(|(_, g)| *g)
                .ok_or_else(|| format!("snapshot names unknown global {index}"))?;
            let val = match value {
                GlobalValue::I32(v) => Val::I32(v),
                GlobalValue::I64(v) => Val::I64(v),
                GlobalValue::F32(v) => Val::F32(v),
                GlobalValue::F64(v) => Val::F64(v),
            };
            global.set(&mut self.store, val).map_err(|e| format!("restoring global {index}: {e:#}"))?;
        }
        if snapshot.header.globals.len() != self.globals.len() {
            return Err(format!(
                "snapshot holds {} globals, module has {}",
                snapshot.header.globals.len(),
                self.globals.len()
            ));
        }
        Ok(())
    }
}
