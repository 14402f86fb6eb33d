//! The synthetic chain benchmark: operator i mirrors namespace ns-i into
//! ns-(i+1); one round bumps the nonce in ns-1 and waits for it in ns-(n+1).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;
use uuid::Uuid;
use wasm_operator_apiserver::ApiServer;
use guest_sdk::ReconcileContext;
use wasm_operator_stats::schema::{
    write_manifest, write_rows, Environment, LatencyRow, MemoryRow, Phase, PhaseWindow, RunManifest, RunStatus,
    LATENCY_CSV, LATENCY_HEADER, MANIFEST_FORMAT, MEMORY_CSV, MEMORY_HEADER, RUN_MANIFEST,
};

use crate::bridge::{Delayed, InProcess, Transport};
use crate::error::RuntimeError;
use crate::handle::RuntimeHandle;
use crate::memory::{MemoryError, MemorySampler, SamplerConfig};
use crate::native::synthetic_program;
use crate::policy::{OpKind, UnloadPolicy};
use crate::runtime::{InstanceState, RuntimeConfig};

/// Name of the resource every round updates.
pub const RESOURCE: &str = "r";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// The reconcile logic as native tasks on the same event loop, no engine.
    #[serde(rename = "no-isolation", alias = "in-process-no-isolation", alias = "InProcessNoIsolation")]
    InProcessNoIsolation,
    #[serde(rename = "wasm", alias = "Wasm")]
    Wasm,
    #[serde(rename = "wasm-unload", alias = "wasm-unload-every-turn", alias = "WasmUnloadEveryTurn")]
    WasmUnloadEveryTurn,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::InProcessNoIsolation => "no-isolation",
            Variant::Wasm => "wasm",
            Variant::WasmUnloadEveryTurn => "wasm-unload",
        }
    }

    pub fn policy(self) -> UnloadPolicy {
        match self {
            Variant::WasmUnloadEveryTurn => UnloadPolicy::every_turn(),
            _ => UnloadPolicy::never(),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>, T: Deserialize<'de>>(d: D) -> Result<Vec<T>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_counts() -> Vec<u32> {
    (1..=10).map(|i| i * 10).collect()
}
fn default_rounds() -> u32 {
    500
}
fn default_runs() -> u32 {
    5
}
fn default_variants() -> Vec<Variant> {
    vec![Variant::Wasm]
}
fn default_ballast() -> Vec<u64> {
    vec![0]
}
fn default_idle() -> u64 {
    120
}
fn default_timeout() -> u64 {
    30
}
fn default_active_sample() -> u64 {
    100
}
fn default_idle_sample() -> u64 {
    1000
}

/// Benchmark configuration document. Every (variant, count, ballast) cell
/// is run `runs_per_config` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_counts")]
    pub operator_counts: Vec<u32>,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_runs")]
    pub runs_per_config: u32,
    #[serde(default = "default_variants", alias = "variant", deserialize_with = "one_or_many")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_ballast", deserialize_with = "one_or_many")]
    pub ballast_bytes: Vec<u64>,
    #[serde(default = "default_idle")]
    pub idle_observation_secs: u64,
    /// Latency added to every non-watch API request.
    #[serde(default)]
    pub hop_delay_ms: u64,
    #[serde(default = "default_timeout")]
    pub round_timeout_secs: u64,
    #[serde(default = "default_active_sample")]
    pub active_sample_ms: u64,
    #[serde(default = "default_idle_sample")]
    pub idle_sample_ms: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("round {round}: nonce did not reach ns-{target} within {timeout:?}")]
    Timeout { round: u32, target: u32, timeout: Duration },
    #[error("chain not ready: {0}")]
    NotReady(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Config(m.to_owned()));
        if self.operator_counts.is_empty() {
            return bad("operator_counts must not be empty");
        }
        if self.operator_counts.contains(&0) {
            return bad("operator counts must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.runs_per_config == 0 {
            return bad("runs_per_config must be at least 1");
        }
        if self.variants.is_empty() {
            return bad("variants must not be empty");
        }
        if self.ballast_bytes.is_empty() {
            return bad("ballast_bytes must not be empty");
        }
        if self.round_timeout_secs == 0 || self.active_sample_ms == 0 || self.idle_sample_ms == 0 {
            return bad("timeouts and sample intervals must be positive");
        }
        Ok(())
    }

    /// Every run the config asks for, in execution order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &variant in &self.variants {
            for &operators in &self.operator_counts {
                for &ballast_bytes in &self.ballast_bytes {
                    for run_index in 1..=self.runs_per_config {
                        out.push(RunSpec { variant, operators, ballast_bytes, run_index });
                    }
                }
            }
        }
        out
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            active_interval: Duration::from_millis(self.active_sample_ms),
            idle_interval: Duration::from_millis(self.idle_sample_ms),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSpec {
    pub variant: Variant,
    pub operators: u32,
    pub ballast_bytes: u64,
    pub run_index: u32,
}

impl RunSpec {
    pub fn dir_name(&self) -> String {
        format!("{}-n{}-b{}-r{}", self.variant.as_str(), self.operators, self.ballast_bytes, self.run_index)
    }
}

/// Where a chain keeps its files and what it runs.
#[derive(Clone)]
pub struct ChainEnv {
    /// The synthetic operator module; unused for the native variant.
    pub module: Arc<Vec<u8>>,
    pub cache_dir: PathBuf,
    pub snapshot_dir: PathBuf,
    pub hop_delay: Duration,
}

pub fn namespace(i: u32) -> String {
    format!("ns-{i}")
}

/// A running chain of `n` operators over a private mock server.
pub struct Chain {
    pub server: Arc<ApiServer>,
    pub handle: RuntimeHandle,
    pub instances: Vec<Uuid>,
    pub n: u32,
}

const READY_TIMEOUT: Duration = Duration::from_secs(120);

pub fn build_chain(n: u32, variant: Variant, ballast_bytes: u64, env: &ChainEnv) -> Result<Chain, WorkloadError> {
    if n == 0 {
        return Err(WorkloadError::Config("a chain needs at least one operator".into()));
    }
    let server = Arc::new(ApiServer::new());
    let base = InProcess(Arc::clone(&server));
    let transport: Arc<dyn Transport> = if env.hop_delay.is_zero() {
        Arc::new(base)
    } else {
        Arc::new(Delayed { inner: base, delay: env.hop_delay })
    };
    let mut config = RuntimeConfig::new(&env.cache_dir, &env.snapshot_dir);
    config.policy = variant.policy();
    let module = Arc::clone(&env.module);
    let handle = RuntimeHandle::launch_with(config, Some(transport), move |rt| {
        let hash = match variant {
            Variant::InProcessNoIsolation => None,
            _ => Some(rt.compile_and_cache(&module)?),
        };
        for i in 1..=n {
            let ctx = ReconcileContext {
                source_namespace: namespace(i),
                destination_namespace: namespace(i + 1),
                heap_ballast_bytes: ballast_bytes,
            }
            .to_json();
            match &hash {
                Some(h) => rt.spawn(h, &ctx)?,
                None => rt.spawn_native(synthetic_program, &ctx),
            };
        }
        Ok(())
    })?;
    let instances = handle.call(|rt| rt.instance_ids())?;
    let chain = Chain { server, handle, instances, n };
    chain.wait_until(READY_TIMEOUT, |states| states.iter().all(|s| s.watching))?;
    Ok(chain)
}

/// What [`Chain::wait_until`] inspects per instance.
#[derive(Debug, Clone, Copy)]
pub struct InstanceView {
    pub state: InstanceState,
    pub watching: bool,
}

impl Chain {
    pub fn views(&self) -> Result<Vec<InstanceView>, WorkloadError> {
        Ok(self.handle.call(|rt| {
            rt.records()
                .map(|r| InstanceView {
                    state: r.state,
                    watching: r.started && r.pending.values().any(|k| *k == OpKind::Watch),
                })
                .collect::<Vec<_>>()
        })?)
    }

    /// Polls until `done` holds for the instance views or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, done: impl Fn(&[InstanceView]) -> bool) -> Result<(), WorkloadError> {
        let deadline = Instant::now() + timeout;
        loop {
            let views = self.views()?;
            if views.len() == self.n as usize && done(&views) {
                return Ok(());
            }
            if Instant::now() >= deadline {
                let failed = views.iter().filter(|v| v.state == InstanceState::Failed).count();
                return Err(WorkloadError::NotReady(format!(
                    "{} of {} instances present, {failed} failed",
                    views.len(),
                    self.n
                )));
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn metrics_json(&self) -> Result<serde_json::Value, WorkloadError> {
        let m = self.handle.call(|rt| rt.metrics())?;
        Ok(serde_json::to_value(m).expect("metrics serialize"))
    }

    pub fn shutdown(self) {
        self.handle.shutdown();
    }
}

/// Runs `rounds` sequential propagation rounds. Nonces are round numbers,
/// continuing after `first_round - 1`. Times are relative to `origin`.
pub fn run_active_phase(
    chain: &Chain,
    first_round: u32,
    rounds: u32,
    timeout: Duration,
    origin: Instant,
) -> Result<Vec<LatencyRow>, (Vec<LatencyRow>, WorkloadError)> {
    let io = tokio::runtime::Builder::new_current_thread().enable_time().build().expect("current-thread runtime");
    let target = chain.n + 1;
    let mut events = chain.server.watch(&namespace(target), chain.server.latest_version());
    let mut rows = Vec::with_capacity(rounds as usize);
    for round in first_round..first_round + rounds {
        let nonce = u64::from(round);
        let start = Instant::now();
        if let Err(e) = chain.server.apply(&namespace(1), RESOURCE, nonce) {
            return Err((rows, WorkloadError::Config(e.to_string())));
        }
        let reached = io.block_on(async {
            tokio::time::timeout(timeout, async {
                while let Some(e) = events.next_event().await {
                    if e.record.name == RESOURCE && e.record.spec_nonce >= nonce {
                        return true;
                    }
                }
                false
            })
            .await
        });
        let end = Instant::now();
        if reached != Ok(true) {
            return Err((rows, WorkloadError::Timeout { round, target, timeout }));
        }
        let since = |t: Instant| t.duration_since(origin).as_nanos() as u64;
        rows.push(LatencyRow {
            round,
            start_ns: since(start),
            end_ns: since(end),
            elapsed_us: end.duration_since(start).as_micros() as u64,
        });
    }
    Ok(rows)
}

/// Waits out the idle window issuing no mutations.
pub fn run_idle_phase(duration: Duration) {
    std::thread::sleep(duration);
}

/// Outcome of one benchmark run as written to its directory.
pub struct RunResult {
    pub manifest: RunManifest,
    pub latency: Vec<LatencyRow>,
    pub memory: Vec<MemoryRow>,
}

/// Builds a chain, runs the active and idle phases and writes `run.json`,
/// `latency.csv` and `memory.csv` into `out_dir`. Failures are recorded in
/// the manifest, not returned, unless the output cannot be written.
pub fn run_once(config: &BenchConfig, spec: RunSpec, env: &ChainEnv, out_dir: &Path) -> Result<RunResult, WorkloadError> {
    fs::create_dir_all(out_dir).map_err(|source| WorkloadError::Io { context: format!("creating {}", out_dir.display()), source })?;
    let origin = Instant::now();
    let mut phases = Vec::new();
    let mut latency = Vec::new();
    let mut memory = Vec::new();
    let mut metrics = None;
    let failure = (|| -> Result<(), WorkloadError> {
        let chain = build_chain(spec.operators, spec.variant, spec.ballast_bytes, env)?;
        let sampler = MemorySampler::start(origin, config.sampler(), Phase::Active)?;
        let since = |t: Instant| t.duration_since(origin).as_nanos() as u64;

        let active_start = since(Instant::now());
        let active = run_active_phase(
            &chain,
            1,
            config.rounds,
            Duration::from_secs(config.round_timeout_secs),
            origin,
        );
        let active_end = since(Instant::now());
        phases.push(PhaseWindow { phase: Phase::Active, start_ns: active_start, end_ns: active_end });
        let outcome = match active {
            Ok(rows) => {
                latency = rows;
                sampler.set_phase(Phase::Idle);
                let idle_start = since(Instant::now());
                run_idle_phase(Duration::from_secs(config.idle_observation_secs));
                phases.push(PhaseWindow { phase: Phase::Idle, start_ns: idle_start, end_ns: since(Instant::now()) });
                Ok(())
            }
            Err((rows, e)) => {
                latency = rows;
                Err(e)
            }
        };
        memory = sampler.finish()?;
        metrics = chain.metrics_json().ok();
        chain.shutdown();
        outcome
    })()
    .err();

    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT,
        variant: spec.variant.as_str().to_owned(),
        operators: spec.operators,
        ballast_bytes: spec.ballast_bytes,
        run_index: spec.run_index,
        rounds: config.rounds,
        status: if failure.is_some() { RunStatus::Failed } else { RunStatus::Ok },
        failure: failure.map(|e| e.to_string()),
        phases,
        config: serde_json::to_value(config).expect("config serializes"),
        environment: Environment::current(),
        metrics,
    };
    let write_err = |path: &Path| {
        let context = format!("writing {}", path.display());
        move |source| WorkloadError::Io { context, source }
    };
    let path = out_dir.join(LATENCY_CSV);
    write_rows(&path, &LATENCY_HEADER, &latency).map_err(write_err(&path))?;
    let path = out_dir.join(MEMORY_CSV);
    write_rows(&path, &MEMORY_HEADER, &memory).map_err(write_err(&path))?;
    let path = out_dir.join(RUN_MANIFEST);
    write_manifest(&path, &manifest).map_err(write_err(&path))?;
    Ok(RunResult { manifest, latency, memory })
}
