//! `run`: host every module in a directory until interrupted.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{anyhow, Context};
use crossbeam_channel::RecvTimeoutError;
use wasm_operator_apiserver::ApiServer;
use wasm_operator_core::instrument::validate_and_instrument;
use wasm_operator_core::{InProcess, RemoteHttp, RuntimeConfig, RuntimeHandle, Transport};

use crate::config::{RunConfig, TransportKind};
use crate::CliError;

/// A module found in the modules directory.
struct ModuleFile {
    path: PathBuf,
    bytes: Vec<u8>,
    config: Vec<u8>,
}

fn scan(dir: &Path) -> anyhow::Result<Vec<ModuleFile>> {
    let entries = fs::read_dir(dir).with_context(|| format!("reading modules_dir {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wasm") && p.is_file())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|path| {
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let sidecar = path.with_extension("json");
            let config = if sidecar.exists() {
                let text = fs::read(&sidecar).with_context(|| format!("reading {}", sidecar.display()))?;
                serde_json::from_slice::<serde_json::Value>(&text)
                    .with_context(|| format!("{} is not valid JSON", sidecar.display()))?;
                text
            } else {
                Vec::new()
            };
            Ok(ModuleFile { path, bytes, config })
        })
        .collect()
}

/// Validates every module up front so one bad file is reported with the
/// others rather than after half the fleet has started.
fn check_modules(modules: &[ModuleFile]) -> Result<(), CliError> {
    let mut problems = Vec::new();
    for m in modules {
        if let Err(e) = validate_and_instrument(&m.bytes) {
            let symbol = e.symbol().map(|s| format!(" [symbol: {s}]")).unwrap_or_default();
            problems.push(format!("{}: {e}{symbol}", m.path.display()));
        }
    }
    if problems.is_empty() {
        return Ok(());
    }
    for p in &problems {
        eprintln!("invalid module {p}");
    }
    Err(CliError::usage(anyhow!("{} of {} modules failed validation", problems.len(), modules.len())))
}

enum Stop {
    Signal(&'static str),
    Elapsed,
}

pub fn cmd_run(config: RunConfig, run_for: Option<Duration>) -> Result<(), CliError> {
    for dir in [&config.cache_dir, &config.snapshot_dir] {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(CliError::usage)?;
    }
    let modules = scan(&config.modules_dir).map_err(CliError::usage)?;
    check_modules(&modules)?;

    let io = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(1)
        .enable_all()
        .build()
        .context("starting I/O runtime")
        .map_err(CliError::fault)?;

    let transport: Arc<dyn Transport> = match config.transport.kind {
        TransportKind::InProcess => {
            let server = Arc::new(ApiServer::new());
            if let Some(addr) = config.listen {
                let http = io
                    .block_on(wasm_operator_apiserver::http::spawn_http(Arc::clone(&server), addr))
                    .with_context(|| format!("binding {addr}"))
                    .map_err(CliError::usage)?;
                println!("mock api server listening on http://{}", http.addr);
            }
            Arc::new(InProcess(server))
        }
        TransportKind::RemoteHttp => {
            let url = config.transport.base_url.as_deref().expect("validated");
            let remote = RemoteHttp::new(url, config.transport.bearer_token.clone(), config.transport.tls_verify)
                .map_err(|e| CliError::usage(anyhow!(e)))?;
            Arc::new(remote)
        }
    };

    let mut rt_config = RuntimeConfig::new(&config.cache_dir, &config.snapshot_dir);
    rt_config.policy = config.unload;
    rt_config.watchdog = Some(config.watchdog());
    rt_config.compress_snapshots = config.compress_snapshots;

    let copies = config.instances_per_module;
    let module_count = modules.len();
    let handle = RuntimeHandle::launch_with(rt_config, Some(transport), move |rt| {
        for m in &modules {
            let hash = rt.compile_and_cache(&m.bytes)?;
            for _ in 0..copies {
                rt.spawn(&hash, &m.config)?;
            }
        }
        Ok(())
    })
    .context("starting runtime")
    .map_err(CliError::fault)?;

    // Handlers are registered before announcing readiness so that a signal
    // sent right after the announcement is not lost.
    let signals = {
        let _guard = io.enter();
        install_signals().map_err(CliError::fault)?
    };
    let (stop_tx, stop_rx) = crossbeam_channel::bounded(1);
    io.spawn(async move {
        let _ = stop_tx.send(signals.await);
    });
    println!("running {} instances from {module_count} modules", module_count as u64 * u64::from(copies));

    let started = Instant::now();
    let stop = loop {
        let wait = match run_for {
            Some(d) => d.saturating_sub(started.elapsed()).min(Duration::from_secs(1)),
            None => Duration::from_secs(1),
        };
        match stop_rx.recv_timeout(wait) {
            Ok(s) => break s,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break Stop::Signal("signal handler failed"),
        }
        if run_for.is_some_and(|d| started.elapsed() >= d) {
            break Stop::Elapsed;
        }
        if handle.call(|_| ()).is_err() {
            return Err(CliError::fault(anyhow!("event loop stopped unexpectedly")));
        }
    };
    match stop {
        Stop::Signal(name) => eprintln!("{name} received, shutting down"),
        Stop::Elapsed => eprintln!("run time elapsed, shutting down"),
    }
    shutdown(handle, &config.metrics_path)
}

#[cfg(unix)]
fn install_signals() -> anyhow::Result<impl std::future::Future<Output = Stop>> {
    use tokio::signal::unix::{signal, SignalKind};
    let mut int = signal(SignalKind::interrupt()).context("installing SIGINT handler")?;
    let mut term = signal(SignalKind::terminate()).context("installing SIGTERM handler")?;
    Ok(async move {
        tokio::select! {
            _ = int.recv() => Stop::Signal("SIGINT"),
            _ = term.recv() => Stop::Signal("SIGTERM"),
        }
    })
}

#[cfg(not(unix))]
fn install_signals() -> anyhow::Result<impl std::future::Future<Output = Stop>> {
    Ok(async {
        let _ = tokio::signal::ctrl_c().await;
        Stop::Signal("interrupt")
    })
}

/// Snapshots every loaded instance, writes metrics and stops the loop.
/// The snapshot call runs between turns, so no turn is interrupted.
fn shutdown(handle: RuntimeHandle, metrics_path: &Path) -> Result<(), CliError> {
    let results = handle.call(|rt| rt.snapshot_all()).map_err(|e| CliError::fault(e.into()))?;
    let metrics = handle.call(|rt| rt.metrics_json()).map_err(|e| CliError::fault(e.into()))?;
    handle.shutdown();

    if let Some(parent) = metrics_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display())).map_err(CliError::fault)?;
    }
    fs::write(metrics_path, metrics)
        .with_context(|| format!("writing {}", metrics_path.display()))
        .map_err(CliError::fault)?;

    let failed: Vec<String> =
        results.iter().filter_map(|(id, r)| r.as_ref().err().map(|e| format!("{id}: {e}"))).collect();
    println!("snapshotted {} instances", results.len() - failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        for f in &failed {
            eprintln!("snapshot failed for {f}");
        }
        Err(CliError::fault(anyhow!("{} snapshots failed", failed.len())))
    }
}
