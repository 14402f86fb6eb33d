//! Resident-set sampling from the platform's process statistics.

use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use thiserror::Error;
use wasm_operator_stats::schema::{MemoryRow, Phase};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("resident memory sampling is not supported on {0}")]
    Unsupported(&'static str),
    #[error("no statistics for process {pid}: {source}")]
    NoProcess {
        pid: u32,
        #[source]
        source: std::io::Error,
    },
    #[error("unexpected statm contents {0:?}")]
    Parse(String),
}

fn page_size() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let size = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if size > 0 {
        size as u64
    } else {
        4096
    }
}

/// Resident bytes of process `pid`.
#[cfg(target_os = "linux")]
pub fn resident_bytes(pid: u32) -> Result<u64, MemoryError> {
    let statm = std::fs::read_to_string(format!("/proc/{pid}/statm")).map_err(|source| MemoryError::NoProcess { pid, source })?;
    let pages: u64 = statm
        .split_whitespace()
        .nth(1)
        .and_then(|f| f.parse().ok())
        .ok_or_else(|| MemoryError::Parse(statm.clone()))?;
    Ok(pages * page_size())
}

#[cfg(not(target_os = "linux"))]
pub fn resident_bytes(_pid: u32) -> Result<u64, MemoryError> {
    Err(MemoryError::Unsupported(std::env::consts::OS))
}

pub fn own_resident_bytes() -> Result<u64, MemoryError> {
    resident_bytes(std::process::id())
}

/// One reading: nanoseconds since `origin`, plus resident bytes.
pub fn sample_memory(pid: u32, origin: Instant) -> Result<(u64, u64), MemoryError> {
    let rss = resident_bytes(pid)?;
    Ok((origin.elapsed().as_nanos() as u64, rss))
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub active_interval: Duration,
    pub idle_interval: Duration,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { active_interval: Duration::from_millis(100), idle_interval: Duration::from_secs(1) }
    }
}

/// Samples this process on its own thread. The driver switches phases with
/// an atomic store and collects rows at the end, so sampling never contends
/// with the measured work.
pub struct MemorySampler {
    phase: Arc<AtomicU8>,
    stop: Arc<AtomicBool>,
    rx: Receiver<MemoryRow>,
    thread: Option<JoinHandle<Option<MemoryError>>>,
}

fn encode(phase: Phase) -> u8 {
    match phase {
        Phase::Active => 0,
        Phase::Idle => 1,
    }
}

fn decode(v: u8) -> Phase {
    if v == 0 {
        Phase::Active
    } else {
        Phase::Idle
    }
}

impl MemorySampler {
    pub fn start(origin: Instant, config: SamplerConfig, phase: Phase) -> Result<Self, MemoryError> {
        let pid = std::process::id();
        resident_bytes(pid)?;
        let phase = Arc::new(AtomicU8::new(encode(phase)));
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = crossbeam_channel::unbounded();
        let thread = {
            let (phase, stop) = (Arc::clone(&phase), Arc::clone(&stop));
            std::thread::Builder::new()
                .name("wop-memory".into())
                .spawn(move || sample_loop(pid, origin, config, &phase, &stop, &tx))
                .expect("spawning sampler thread")
        };
        Ok(MemorySampler { phase, stop, rx, thread: Some(thread) })
    }

    pub fn set_phase(&self, phase: Phase) {
        self.phase.store(encode(phase), Ordering::Release);
    }

    /// Stops sampling and returns every row in time order.
    pub fn finish(mut self) -> Result<Vec<MemoryRow>, MemoryError> {
        self.stop.store(true, Ordering::Release);
        if let Some(err) = self.thread.take().and_then(|t| t.join().ok()).flatten() {
            return Err(err);
        }
        Ok(self.rx.try_iter().collect())
    }
}

impl Drop for MemorySampler {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn sample_loop(
    pid: u32,
    origin: Instant,
    config: SamplerConfig,
    phase: &AtomicU8,
    stop: &AtomicBool,
    tx: &Sender<MemoryRow>,
) -> Option<MemoryError> {
    const SLICE: Duration = Duration::from_millis(10);
    let mut next = Instant::now();
    let mut last_phase = None;
    loop {
        if stop.load(Ordering::Acquire) {
            return None;
        }
        let now = Instant::now();
        let current = decode(phase.load(Ordering::Acquire));
        // A phase switch takes a reading immediately so each window starts with one.
        if now >= next || last_phase != Some(current) {
            match sample_memory(pid, origin) {
                Ok((t_ns, rss_bytes)) => {
                    let _ = tx.send(MemoryRow { t_ns, phase: current, rss_bytes });
                }
                Err(e) => return Some(e),
            }
            last_phase = Some(current);
            let interval = match current {
                Phase::Active => config.active_interval,
                Phase::Idle => config.idle_interval,
            };
            next = now + interval;
        }
        std::thread::sleep(SLICE.min(next.saturating_duration_since(Instant::now())).max(Duration::from_millis(1)));
    }
}
