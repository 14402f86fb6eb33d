//! The `run` configuration document.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use wasm_operator_core::{UnloadMode, UnloadPolicy};

pub const CACHE_ENV: &str = "WASM_OPERATOR_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    /// A mock API server living in this process.
    #[default]
    InProcess,
    RemoteHttp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    #[serde(default)]
    pub kind: TransportKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bearer_token: Option<String>,
    #[serde(default = "yes")]
    pub tls_verify: bool,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig { kind: TransportKind::InProcess, base_url: None, bearer_token: None, tls_verify: true }
    }
}

fn yes() -> bool {
    true
}

fn one() -> u32 {
    1
}

fn default_cache() -> PathBuf {
    PathBuf::from(".wasm-operator/cache")
}

fn default_snapshots() -> PathBuf {
    PathBuf::from(".wasm-operator/snapshots")
}

fn default_metrics() -> PathBuf {
    PathBuf::from("metrics.json")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub modules_dir: PathBuf,
    #[serde(default = "default_cache")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_snapshots")]
    pub snapshot_dir: PathBuf,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default)]
    pub unload: UnloadPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen: Option<SocketAddr>,
    #[serde(default = "default_metrics")]
    pub metrics_path: PathBuf,
    #[serde(default = "one")]
    pub instances_per_module: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watchdog_ms: Option<u64>,
    #[serde(default)]
    pub compress_snapshots: bool,
}

pub const RUN_KEYS_HELP: &str = "\
Config keys (JSON object):
  modules_dir           directory scanned for *.wasm modules (required)
  cache_dir             compiled module cache [.wasm-operator/cache]
  snapshot_dir          where unloaded instances are written [.wasm-operator/snapshots]
  transport.kind        in-process | remote-http [in-process]
  transport.base_url    API server URL, required for remote-http
  transport.bearer_token
  transport.tls_verify  [true]
  unload.mode           never | every-turn | idle-timeout [never]
  unload.idle_timeout_ms  [60000]
  listen                expose the in-process mock server over HTTP, e.g. 127.0.0.1:8080
  metrics_path          metrics JSON written at shutdown [metrics.json]
  instances_per_module  copies spawned per module [1]
  watchdog_ms           per-turn time budget [10000]
  compress_snapshots    [false]
Relative paths are resolved against the config file's directory.
A sidecar <module>.json next to a module is passed to it as its config.
The WASM_OPERATOR_CACHE environment variable overrides cache_dir.";

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let config: RunConfig = serde_json::from_str(text).context("parsing run config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut config = Self::parse(&text)?;
        config.resolve(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.unload.mode == UnloadMode::IdleTimeout && self.unload.idle_timeout.is_zero() {
            bail!("unload.idle_timeout_ms must be positive in idle-timeout mode");
        }
        if self.transport.kind == TransportKind::RemoteHttp && self.transport.base_url.is_none() {
            bail!("transport.base_url is required for remote-http");
        }
        if self.transport.kind == TransportKind::RemoteHttp && self.listen.is_some() {
            bail!("listen only applies to the in-process transport");
        }
        if self.instances_per_module == 0 {
            bail!("instances_per_module must be at least 1");
        }
        if self.watchdog_ms == Some(0) {
            bail!("watchdog_ms must be positive");
        }
        Ok(())
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        for p in [&mut self.modules_dir, &mut self.cache_dir, &mut self.snapshot_dir, &mut self.metrics_path] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    /// Applies the cache override from the environment.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            self.cache_dir = PathBuf::from(dir);
        }
    }

    pub fn watchdog(&self) -> Duration {
        Duration::from_millis(self.watchdog_ms.unwrap_or(10_000))
    }
}
