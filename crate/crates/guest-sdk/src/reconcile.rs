//! The synthetic propagation controller.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use wasm_operator_abi::resource::EventType;

use crate::client::{apply, log, watch_testresources};

/// Per-instance configuration, delivered as `{"source":..,"dest":..,"ballast_bytes":..}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileContext {
    #[serde(rename = "source")]
    pub source_namespace: String,
    #[serde(rename = "dest")]
    pub destination_namespace: String,
    #[serde(default)]
    pub heap_ballast_bytes: u64,
}

impl ReconcileContext {
    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        struct Wire {
            source: String,
            dest: String,
            #[serde(default)]
            ballast_bytes: u64,
        }
        let w: Wire = serde_json::from_slice(bytes)?;
        Ok(ReconcileContext {
            source_namespace: w.source,
            destination_namespace: w.dest,
            heap_ballast_bytes: w.ballast_bytes,
        })
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(&serde_json::json!({
            "source": self.source_namespace,
            "dest": self.destination_namespace,
            "ballast_bytes": self.heap_ballast_bytes,
        }))
        .expect("context serializes")
    }
}

/// Heap memory held for the lifetime of an operator. Every 4096th byte is
/// written so the pages are actually resident.
pub struct Ballast(Vec<u8>);

pub const BALLAST_PATTERN: u8 = 0xA5;
pub const BALLAST_STRIDE: usize = 4096;

impl Ballast {
    pub fn new(bytes: u64) -> Self {
        let len = usize::try_from(bytes).expect("ballast fits the address space");
        let mut buf = Vec::with_capacity(len);
        buf.resize(len, 0);
        for i in (0..len).step_by(BALLAST_STRIDE) {
            buf[i] = BALLAST_PATTERN;
        }
        Ballast(buf)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_intact(&self) -> bool {
        (0..self.0.len()).step_by(BALLAST_STRIDE).all(|i| self.0[i] == BALLAST_PATTERN)
    }
}

/// Mirrors every ADDED/MODIFIED resource of the source namespace into the
/// destination namespace under the same name and nonce. Runs until the watch
/// is closed.
pub async fn synthetic_reconcile(ctx: ReconcileContext) {
    let ballast = Ballast::new(ctx.heap_ballast_bytes);
    // name -> last nonce written downstream; re-deliveries are skipped.
    let mut propagated: BTreeMap<String, u64> = BTreeMap::new();
    let mut events = watch_testresources(&ctx.source_namespace, 0);
    while let Some(event) = events.next().await {
        let event = match event {
            Ok(e) => e,
            Err(e) => {
                log(&format!("{}: skipping event: {e}", ctx.source_namespace));
                continue;
            }
        };
        if event.event_type == EventType::Deleted {
            continue;
        }
        let name = event.object.metadata.name;
        let nonce = event.object.spec.nonce;
        if propagated.get(&name) == Some(&nonce) {
            continue;
        }
        match apply(&ctx.destination_namespace, &name, nonce).await {
            Ok(_) => {
                propagated.insert(name, nonce);
            }
            Err(e) => log(&format!("{} -> {}: apply {name} failed: {e}", ctx.source_namespace, ctx.destination_namespace)),
        }
    }
    debug_assert!(ballast.is_intact());
    log(&format!("{}: watch closed ({:?})", ctx.source_namespace, events.closed_status()));
}
