//! On-disk layout of one benchmark run: `run.json`, `latency.csv`, `memory.csv`.

use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST: &str = "run.json";
pub const LATENCY_CSV: &str = "latency.csv";
pub const MEMORY_CSV: &str = "memory.csv";

pub const LATENCY_HEADER: [&str; 4] = ["round", "start_ns", "end_ns", "elapsed_us"];
pub const MEMORY_HEADER: [&str; 3] = ["t_ns", "phase", "rss_bytes"];

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Active,
    Idle,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Active => "active",
            Phase::Idle => "idle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseWindow {
    pub phase: Phase,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub tool_version: String,
    #[serde(default)]
    pub kernel: Option<String>,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            os: std::env::consts::OS.to_owned(),
            arch: std::env::consts::ARCH.to_owned(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            kernel: std::fs::read_to_string("/proc/sys/kernel/osrelease")
                .ok()
                .map(|s| s.trim().to_owned()),
        }
    }
}

/// `run.json`: what was run and how it went. `config` carries the complete
/// benchmark configuration document the run was started from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub variant: String,
    pub operators: u32,
    pub ballast_bytes: u64,
    pub run_index: u32,
    pub rounds: u32,
    pub status: RunStatus,
    #[serde(default)]
    pub failure: Option<String>,
    pub phases: Vec<PhaseWindow>,
    pub config: serde_json::Value,
    pub environment: Environment,
    #[serde(default)]
    pub metrics: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn phase(&self, phase: Phase) -> Option<PhaseWindow> {
        self.phases.iter().copied().find(|w| w.phase == phase)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub round: u32,
    pub start_ns: u64,
    pub end_ns: u64,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryRow {
    pub t_ns: u64,
    pub phase: Phase,
    pub rss_bytes: u64,
}

/// Writes `header` and then `rows` as CSV. The header is written even when
/// there are no rows.
pub fn write_rows<T: Serialize>(path: &std::path::Path, header: &[&str], rows: &[T]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()
}

pub fn write_manifest(path: &std::path::Path, manifest: &RunManifest) -> std::io::Result<()> {
    let json = serde_json::to_vec_pretty(manifest).map_err(std::io::Error::other)?;
    std::fs::write(path, json)
}
