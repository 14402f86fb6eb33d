//! Content-addressed cache of compiled modules.
//!
//! `<dir>/<hex sha256>.cwasm` holds the serialized machine code and
//! `<dir>/<hex sha256>.meta` a small JSON description. The hash is taken over
//! the module bytes as submitted, before instrumentation.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wasmtime::{Engine, Module};

use crate::error::RuntimeError;
use crate::instrument::validate_and_instrument;

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModuleHash(pub [u8; 32]);

impl ModuleHash {
    pub fn of(bytes: &[u8]) -> Self {
        ModuleHash(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(ModuleHash(out))
    }
}

impl fmt::Display for ModuleHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ModuleHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModuleHash({})", &self.to_hex()[..12])
    }
}

/// Contents of the `.meta` sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub source_len: u64,
    pub created_at: u64,
    pub engine_version: String,
    pub engine_compat: u64,
    pub mutable_globals: Vec<u32>,
    pub has_config: bool,
}

pub struct CompiledModule {
    pub hash: ModuleHash,
    pub module: Module,
    pub mutable_globals: Vec<u32>,
    pub has_config: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub compiles: u64,
    pub memory_hits: u64,
    pub disk_hits: u64,
}

impl CacheStats {
    pub fn hits(&self) -> u64 {
        self.memory_hits + self.disk_hits
    }
}

pub const ENGINE_VERSION: &str = "wasmtime 49";

pub struct ModuleCache {
    engine: Engine,
    dir: PathBuf,
    modules: HashMap<ModuleHash, Arc<CompiledModule>>,
    stats: CacheStats,
}

fn engine_compat(engine: &Engine) -> u64 {
    let mut h = DefaultHasher::new();
    engine.precompile_compatibility_hash().hash(&mut h);
    h.finish()
}

impl ModuleCache {
    pub fn new(engine: Engine, dir: impl Into<PathBuf>) -> Result<Self, RuntimeError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| RuntimeError::io(format!("creating {}", dir.display()), e))?;
        Ok(ModuleCache { engine, dir, modules: HashMap::new(), stats: CacheStats::default() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn artifact_path(&self, hash: &ModuleHash) -> PathBuf {
        self.dir.join(format!("{hash}.cwasm"))
    }

    pub fn meta_path(&self, hash: &ModuleHash) -> PathBuf {
        self.dir.join(format!("{hash}.meta"))
    }

    pub fn get(&self, hash: &ModuleHash) -> Option<Arc<CompiledModule>> {
        self.modules.get(hash).cloned()
    }

    /// Validates, instruments and compiles `bytes`, or reuses an earlier
    /// result from memory or disk.
    pub fn compile_and_cache(&mut self, bytes: &[u8]) -> Result<ModuleHash, RuntimeError> {
        let hash = ModuleHash::of(bytes);
        if self.modules.contains_key(&hash) {
            self.stats.memory_hits += 1;
            return Ok(hash);
        }
        if let Some(compiled) = self.load_from_disk(&hash, bytes.len() as u64) {
            self.stats.disk_hits += 1;
            self.modules.insert(hash, Arc::new(compiled));
            return Ok(hash);
        }

        let instrumented = validate_and_instrument(bytes)?;
        let module = Module::new(&self.engine, &instrumented.bytes).map_err(|e| RuntimeError::Compile(format!("{e:#}")))?;
        self.stats.compiles += 1;
        let meta = CacheMeta {
            source_len: bytes.len() as u64,
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            engine_version: ENGINE_VERSION.to_owned(),
            engine_compat: engine_compat(&self.engine),
            mutable_globals: instrumented.mutable_globals.clone(),
            has_config: instrumented.has_config,
        };
        if let Err(e) = self.persist(&hash, &module, &meta) {
            // The compiled module is still usable; only reuse across processes is lost.
            tracing::warn!(%hash, "could not write module cache: {e}");
        }
        self.modules.insert(
            hash,
            Arc::new(CompiledModule {
                hash,
                module,
                mutable_globals: instrumented.mutable_globals,
                has_config: instrumented.has_config,
            }),
        );
        Ok(hash)
    }

    fn load_from_disk(&self, hash: &ModuleHash, source_len: u64) -> Option<CompiledModule> {
        let meta: CacheMeta = serde_json::from_slice(&fs::read(self.meta_path(hash)).ok()?).ok()?;
        if meta.source_len != source_len || meta.engine_compat != engine_compat(&self.engine) {
            return None;
        }
        // SAFETY: the cache directory is trusted; artifacts are only written
        // by this cache from modules it compiled itself.
        let module = unsafe { Module::deserialize_file(&self.engine, self.artifact_path(hash)) };
        match module {
            Ok(module) => Some(CompiledModule {
                hash: *hash,
                module,
                mutable_globals: meta.mutable_globals,
                has_config: meta.has_config,
            }),
            Err(e) => {
                tracing::warn!(%hash, "ignoring unusable cache artifact: {e}");
                None
            }
        }
    }

    fn persist(&self, hash: &ModuleHash, module: &Module, meta: &CacheMeta) -> std::io::Result<()> {
        let bytes = module.serialize().map_err(std::io::Error::other)?;
        let artifact = self.artifact_path(hash);
        let tmp = artifact.with_extension("cwasm.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, &artifact)?;
        fs::write(self.meta_path(hash), serde_json::to_vec_pretty(meta).map_err(std::io::Error::other)?)?;
        Ok(())
    }
}
