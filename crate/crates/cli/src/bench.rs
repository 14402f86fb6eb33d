//! `bench` and its per-run worker `bench-run`.
//!
//! Every run executes in a fresh child process so that the resident-set
//! samples of one run do not include allocator state left by another.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use wasm_operator_core::workload::{run_once, BenchConfig, ChainEnv, RunSpec, Variant};
use wasm_operator_core::{Runtime, RuntimeConfig};
use wasm_operator_stats::report::{report, write_report};
use wasm_operator_stats::schema::{write_manifest, Environment, RunManifest, RunStatus, MANIFEST_FORMAT, RUN_MANIFEST};

use crate::config::CACHE_ENV;
use crate::CliError;

pub const BENCH_KEYS_HELP: &str = "\
Config keys (JSON object, all optional):
  operator_counts        chain lengths to run [10, 20, ..., 100]
  rounds                 propagation rounds in the active phase [500]
  runs_per_config        repetitions per cell [5]
  variants | variant     no-isolation | wasm | wasm-unload, one or a list [wasm]
  ballast_bytes          per-operator heap ballast, one or a list [0]
  idle_observation_secs  length of the idle phase [120]
  hop_delay_ms           latency added to each API request [0]
  round_timeout_secs     per-round propagation timeout [30]
  active_sample_ms       memory sampling interval while active [100]
  idle_sample_ms         memory sampling interval while idle [1000]
Results go to <out>/bench-<unix time>/<variant>-n<N>-b<bytes>-r<i>/.
The WASM_OPERATOR_CACHE environment variable sets the module cache directory.";

/// Share of failed runs above which the whole benchmark fails.
const MAX_FAILED_SHARE: f64 = 0.2;

pub fn load_config(path: &Path) -> Result<BenchConfig, CliError> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(CliError::usage)?;
    let config: BenchConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(CliError::usage)?;
    config.validate().map_err(|e| CliError::usage(e.into()))?;
    Ok(config)
}

fn cache_dir(flag: Option<PathBuf>, out: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .or(flag)
        .unwrap_or_else(|| out.join("cache"))
}

pub fn cmd_bench(config: BenchConfig, out: &Path, cache: Option<PathBuf>) -> Result<(), CliError> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let out_dir = out.join(format!("bench-{stamp}"));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display())).map_err(CliError::usage)?;
    let config_path = out_dir.join("bench.json");
    fs::write(&config_path, serde_json::to_vec_pretty(&config).expect("config serializes"))
        .with_context(|| format!("writing {}", config_path.display()))
        .map_err(CliError::fault)?;
    let cache = cache_dir(cache, &out_dir);
    let exe = std::env::current_exe().context("locating own executable").map_err(CliError::fault)?;

    warm_cache(&config, &cache).map_err(CliError::fault)?;

    let runs = config.runs();
    let total = runs.len();
    let mut failed = 0usize;
    println!("{total} runs into {}", out_dir.display());
    for (i, spec) in runs.into_iter().enumerate() {
        let run_dir = out_dir.join(spec.dir_name());
        let status = Command::new(&exe)
            .arg("bench-run")
            .arg("--config")
            .arg(&config_path)
            .arg("--spec")
            .arg(serde_json::to_string(&spec).expect("spec serializes"))
            .arg("--out")
            .arg(&run_dir)
            .arg("--cache-dir")
            .arg(&cache)
            .status();
        let ok = match &status {
            Ok(s) if s.success() => true,
            Ok(s) => {
                ensure_manifest(&config, spec, &run_dir, &format!("run process exited with {s}"));
                false
            }
            Err(e) => {
                ensure_manifest(&config, spec, &run_dir, &format!("could not start run process: {e}"));
                false
            }
        };
        failed += usize::from(!ok);
        println!("[{}/{total}] {} {}", i + 1, spec.dir_name(), if ok { "ok" } else { "FAILED" });
    }

    match report(&out_dir).and_then(|bundle| write_report(&bundle, &out_dir).map(|_| bundle)) {
        Ok(bundle) => {
            for note in &bundle.notes {
                eprintln!("note: {note}");
            }
        }
        Err(e) => eprintln!("report not written: {e}"),
    }

    println!("{} of {total} runs failed", failed);
    if failed as f64 > MAX_FAILED_SHARE * total as f64 {
        return Err(CliError::fault(anyhow!("{failed} of {total} runs failed")));
    }
    Ok(())
}

/// Compiles the operator once up front. A run that compiled it itself would
/// carry the compiler's allocations in its memory samples.
pub fn warm_cache(config: &BenchConfig, cache: &Path) -> anyhow::Result<()> {
    if config.variants.iter().all(|v| *v == Variant::InProcessNoIsolation) {
        return Ok(());
    }
    let scratch = tempfile::tempdir().context("creating scratch directory")?;
    let mut rt = Runtime::new(RuntimeConfig::new(cache, scratch.path()), None)?;
    rt.compile_and_cache(guest_artifacts::SYNTHETIC_OPERATOR)?;
    Ok(())
}

/// Leaves a failed manifest behind when the child died before writing one.
fn ensure_manifest(config: &BenchConfig, spec: RunSpec, run_dir: &Path, failure: &str) {
    let path = run_dir.join(RUN_MANIFEST);
    if path.exists() {
        return;
    }
    let manifest = RunManifest {
        format_version: MANIFEST_FORMAT,
        variant: spec.variant.as_str().to_owned(),
        operators: spec.operators,
        ballast_bytes: spec.ballast_bytes,
        run_index: spec.run_index,
        rounds: config.rounds,
        status: RunStatus::Failed,
        failure: Some(failure.to_owned()),
        phases: Vec::new(),
        config: serde_json::to_value(config).expect("config serializes"),
        environment: Environment::current(),
        metrics: None,
    };
    if let Err(e) = fs::create_dir_all(run_dir).and_then(|()| write_manifest(&path, &manifest)) {
        eprintln!("could not record failure in {}: {e}", path.display());
    }
}

/// Executes one run in this process. Exit status reflects the run outcome.
pub fn cmd_bench_run(config: BenchConfig, spec: RunSpec, out: &Path, cache: PathBuf) -> Result<(), CliError> {
    let env = ChainEnv {
        module: Arc::new(guest_artifacts::SYNTHETIC_OPERATOR.to_vec()),
        cache_dir: cache,
        snapshot_dir: out.join("snapshots"),
        hop_delay: Duration::from_millis(config.hop_delay_ms),
    };
    let result = run_once(&config, spec, &env, out).map_err(|e| CliError::fault(e.into()));
    let _ = fs::remove_dir_all(&env.snapshot_dir);
    let result = result?;
    match result.manifest.failure {
        None => Ok(()),
        Some(f) => Err(CliError::fault(anyhow!("{}: {f}", spec.dir_name()))),
    }
}
