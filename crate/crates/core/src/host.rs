//! Per-instance host state and the host functions guests import.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use wasm_operator_abi::{names, Envelope, Limits};
use wasmtime::{Caller, Linker, Memory};

use crate::instrument::MEMORY_EXPORT;

/// A host call made by a guest during a turn, in call order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostCall {
    Request { id: u64, envelope: Envelope },
    /// The guest passed bytes that do not decode as a request envelope.
    Malformed { id: u64, reason: String },
    Delay { id: u64, millis: u64 },
}

impl HostCall {
    pub fn id(&self) -> u64 {
        match self {
            HostCall::Request { id, .. } | HostCall::Malformed { id, .. } | HostCall::Delay { id, .. } => *id,
        }
    }
}

/// Raised by `proc_exit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcExit(pub i32);

impl std::fmt::Display for ProcExit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "guest exited with code {}", self.0)
    }
}

impl std::error::Error for ProcExit {}

pub struct HostState {
    /// Next async id to hand out. Owned by the instance record between turns.
    pub next_id: u64,
    pub calls: Vec<HostCall>,
    pub logs: Vec<String>,
    /// Unterminated stdout/stderr text.
    partial_line: Vec<u8>,
    limits: Limits,
    epoch: Instant,
}

impl HostState {
    pub fn new(next_id: u64, epoch: Instant) -> Self {
        HostState { next_id, calls: Vec::new(), logs: Vec::new(), partial_line: Vec::new(), limits: Limits::default(), epoch }
    }

    fn allocate_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Flushes a trailing unterminated stdout line into the log.
    pub fn flush_output(&mut self) {
        if !self.partial_line.is_empty() {
            let line = String::from_utf8_lossy(&self.partial_line).into_owned();
            self.logs.push(line);
            self.partial_line.clear();
        }
    }

    fn push_output(&mut self, bytes: &[u8]) {
        self.partial_line.extend_from_slice(bytes);
        while let Some(pos) = self.partial_line.iter().position(|&b| b == b'\n') {
            let line: Vec<u8> = self.partial_line.drain(..=pos).collect();
            self.logs.push(String::from_utf8_lossy(&line[..line.len() - 1]).into_owned());
        }
    }
}

fn memory(caller: &mut Caller<'_, HostState>) -> wasmtime::Result<Memory> {
    caller
        .get_export(MEMORY_EXPORT)
        .and_then(|e| e.into_memory())
        .ok_or_else(|| wasmtime::Error::msg("guest memory is not exported"))
}

fn read_bytes(caller: &mut Caller<'_, HostState>, ptr: i32, len: i32) -> wasmtime::Result<Vec<u8>> {
    let mem = memory(caller)?;
    let (ptr, len) = (ptr as u32 as usize, len as u32 as usize);
    mem.data(&caller)
        .get(ptr..ptr.saturating_add(len))
        .map(<[u8]>::to_vec)
        .ok_or_else(|| wasmtime::Error::msg(format!("guest buffer {ptr}+{len} out of bounds")))
}

fn write_bytes(caller: &mut Caller<'_, HostState>, ptr: u32, bytes: &[u8]) -> Result<(), i32> {
    let mem = memory(caller).map_err(|_| ERRNO_FAULT)?;
    let ptr = ptr as usize;
    let dst = mem.data_mut(caller).get_mut(ptr..ptr + bytes.len()).ok_or(ERRNO_FAULT)?;
    dst.copy_from_slice(bytes);
    Ok(())
}

const ERRNO_SUCCESS: i32 = 0;
const ERRNO_BADF: i32 = 8;
const ERRNO_FAULT: i32 = 21;
const ERRNO_INVAL: i32 = 28;

pub fn add_to_linker(linker: &mut Linker<HostState>) -> wasmtime::Result<()> {
    let m = names::HOST_MODULE;
    linker.func_wrap(m, names::IMPORT_KUBE_REQUEST, |mut caller: Caller<'_, HostState>, ptr: i32, len: i32| {
        let bytes = read_bytes(&mut caller, ptr, len)?;
        let state = caller.data_mut();
        let id = state.allocate_id();
        let call = match Envelope::decode_with(&bytes, &state.limits) {
            Ok(envelope) if envelope.kind == wasm_operator_abi::Kind::Request => HostCall::Request { id, envelope },
            Ok(envelope) => HostCall::Malformed { id, reason: format!("expected a request, got {:?}", envelope.kind) },
            Err(e) => HostCall::Malformed { id, reason: e.to_string() },
        };
        state.calls.push(call);
        Ok(id as i64)
    })?;
    linker.func_wrap(m, names::IMPORT_DELAY, |mut caller: Caller<'_, HostState>, millis: i64| {
        let state = caller.data_mut();
        let id = state.allocate_id();
        state.calls.push(HostCall::Delay { id, millis: millis.max(0) as u64 });
        id as i64
    })?;
    linker.func_wrap(m, names::IMPORT_LOG, |mut caller: Caller<'_, HostState>, ptr: i32, len: i32| {
        let bytes = read_bytes(&mut caller, ptr, len)?;
        caller.data_mut().logs.push(String::from_utf8_lossy(&bytes).into_owned());
        wasmtime::Result::Ok(())
    })?;
    add_wasi(linker)
}

/// The small WASI preview1 subset: stdout/stderr into the instance log,
/// clocks, randomness, empty args and environment, and `proc_exit`.
fn add_wasi(linker: &mut Linker<HostState>) -> wasmtime::Result<()> {
    let w = names::WASI_MODULE;
    linker.func_wrap(
        w,
        "fd_write",
        |mut caller: Caller<'_, HostState>, fd: i32, iovs: i32, iovs_len: i32, nwritten: i32| -> wasmtime::Result<i32> {
            if fd != 1 && fd != 2 {
                return Ok(ERRNO_BADF);
            }
            let raw = read_bytes(&mut caller, iovs, iovs_len.saturating_mul(8))?;
            let mut total = 0u32;
            for iov in raw.chunks_exact(8) {
                let ptr = i32::from_le_bytes(iov[..4].try_into().unwrap());
                let len = i32::from_le_bytes(iov[4..].try_into().unwrap());
                let data = read_bytes(&mut caller, ptr, len)?;
                total += data.len() as u32;
                caller.data_mut().push_output(&data);
            }
            Ok(match write_bytes(&mut caller, nwritten as u32, &total.to_le_bytes()) {
                Ok(()) => ERRNO_SUCCESS,
                Err(e) => e,
            })
        },
    )?;
    linker.func_wrap(w, "proc_exit", |_: Caller<'_, HostState>, code: i32| -> wasmtime::Result<()> {
        Err(wasmtime::Error::new(ProcExit(code)))
    })?;
    linker.func_wrap(w, "random_get", |mut caller: Caller<'_, HostState>, buf: i32, len: i32| -> i32 {
        let mut bytes = Vec::with_capacity(len as u32 as usize + 16);
        while bytes.len() < len as u32 as usize {
            bytes.extend_from_slice(uuid::Uuid::new_v4().as_bytes());
        }
        bytes.truncate(len as u32 as usize);
        match write_bytes(&mut caller, buf as u32, &bytes) {
            Ok(()) => ERRNO_SUCCESS,
            Err(e) => e,
        }
    })?;
    linker.func_wrap(
        w,
        "clock_time_get",
        |mut caller: Caller<'_, HostState>, clock: i32, _precision: i64, out: i32| -> i32 {
            let nanos = match clock {
                0 => SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos() as u64),
                1 => caller.data().epoch.elapsed().as_nanos() as u64,
                _ => return ERRNO_INVAL,
            };
            match write_bytes(&mut caller, out as u32, &nanos.to_le_bytes()) {
                Ok(()) => ERRNO_SUCCESS,
                Err(e) => e,
            }
        },
    )?;
    for (sizes, get) in [("environ_sizes_get", "environ_get"), ("args_sizes_get", "args_get")] {
        linker.func_wrap(w, sizes, |mut caller: Caller<'_, HostState>, count: i32, size: i32| -> i32 {
            match write_bytes(&mut caller, count as u32, &0u32.to_le_bytes())
                .and_then(|()| write_bytes(&mut caller, size as u32, &0u32.to_le_bytes()))
            {
                Ok(()) => ERRNO_SUCCESS,
                Err(e) => e,
            }
        })?;
        linker.func_wrap(w, get, |_: Caller<'_, HostState>, _: i32, _: i32| -> i32 { ERRNO_SUCCESS })?;
    }
    linker.func_wrap(w, "sched_yield", |_: Caller<'_, HostState>| -> i32 { ERRNO_SUCCESS })?;
    Ok(())
}
