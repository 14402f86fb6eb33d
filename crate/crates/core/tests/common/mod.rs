#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::{Arc, OnceLock};

use tempfile::TempDir;
use uuid::Uuid;
use wasm_operator_abi::resource::{EventType, TestResource, WatchEvent};
use wasm_operator_abi::{Envelope, Kind};
use wasm_operator_core::host::HostCall;
use wasm_operator_core::{ModuleHash, Output, Runtime, RuntimeConfig, Transport, TurnOutcome};

/// Valid guest with no host calls: `start` returns at once.
pub const FINISH_WAT: &str = r#"(module
    (memory 1)
    (global $sp (mut i32) (i32.const 1024))
    (func (export "start"))
    (func (export "allocate") (param i32) (result i32) (i32.const 0))
    (func (export "wakeup") (param i64 i32 i32)))"#;

pub const UNREACHABLE_WAT: &str = r#"(module
    (memory 1)
    (func (export "start") unreachable)
    (func (export "allocate") (param i32) (result i32) (i32.const 0))
    (func (export "wakeup") (param i64 i32 i32)))"#;

pub const SPIN_WAT: &str = r#"(module
    (memory 1)
    (func (export "start") (loop $l (br $l)))
    (func (export "allocate") (param i32) (result i32) (i32.const 0))
    (func (export "wakeup") (param i64 i32 i32)))"#;

/// Issues one delay on start, then writes a marker into memory on every
/// wakeup and asks for another delay.
pub const TICKER_WAT: &str = r#"(module
    (import "wasm_operator" "delay" (func $delay (param i64) (result i64)))
    (memory 17)
    (global $n (mut i32) (i32.const 0))
    (func (export "start") (drop (call $delay (i64.const 5))))
    (func (export "allocate") (param i32) (result i32) (i32.const 4096))
    (func (export "wakeup") (param i64 i32 i32)
        (global.set $n (i32.add (global.get $n) (i32.const 1)))
        (i32.store (i32.const 65536) (global.get $n))
        (drop (call $delay (i64.const 5)))))"#;

pub fn wat(src: &str) -> Vec<u8> {
    wat::parse_str(src).expect("test module parses")
}

pub struct Fixture {
    pub dir: TempDir,
    pub rt: Runtime,
}

/// One compiled-module cache per test binary, so only the first fixture compiles.
pub fn shared_cache() -> &'static std::path::Path {
    static CACHE: OnceLock<TempDir> = OnceLock::new();
    CACHE.get_or_init(|| tempfile::tempdir().unwrap()).path()
}

pub fn config(dir: &TempDir) -> RuntimeConfig {
    let mut c = RuntimeConfig::new(shared_cache(), dir.path().join("snapshots"));
    c.capture_outputs = true;
    c
}

pub fn fixture() -> Fixture {
    fixture_with(|_| {}, None)
}

pub fn fixture_with(tweak: impl FnOnce(&mut RuntimeConfig), transport: Option<Arc<dyn Transport>>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(&dir);
    tweak(&mut c);
    let rt = Runtime::new(c, transport).unwrap();
    Fixture { dir, rt }
}

pub fn reference(rt: &mut Runtime) -> ModuleHash {
    rt.compile_and_cache(guest_artifacts::REFERENCE_GUESTS).unwrap()
}

pub fn program(name: &str) -> Vec<u8> {
    serde_json::to_vec(&serde_json::json!({ "program": name })).unwrap()
}

pub fn event_payload(namespace: &str, name: &str, nonce: u64, rv: u64) -> Vec<u8> {
    let event = WatchEvent {
        event_type: if rv == 1 { EventType::Added } else { EventType::Modified },
        object: TestResource::new(namespace, name, nonce).with_resource_version(rv),
    };
    Envelope::watch_event(event.to_json()).encode().unwrap()
}

pub fn ok_payload() -> Vec<u8> {
    Envelope::response(200, b"{}".to_vec()).encode().unwrap()
}

pub fn closed_payload(status: u16) -> Vec<u8> {
    Envelope::stream_closed(status, b"closed".to_vec()).encode().unwrap()
}

pub fn is_kind(payload: &[u8], kind: Kind) -> bool {
    Envelope::decode(payload).map(|e| e.kind == kind).unwrap_or(false)
}

/// Drives a `counter` reference guest by hand: feeds watch events one at a
/// time, answering every request and timer it issues before the next event.
/// `unload_before` is asked before every delivery whether to unload (and
/// later reload) the instance at that point.
pub fn drive_counter(
    rt: &mut Runtime,
    id: Uuid,
    nonces: &[u64],
    mut unload_before: impl FnMut() -> bool,
) -> Vec<Output> {
    let mut deliver = |rt: &mut Runtime, aid: u64, payload: Vec<u8>| -> TurnOutcome {
        if unload_before() {
            rt.unload(id).unwrap();
            rt.reload(id).unwrap();
        }
        rt.run_turn(id, Some((aid, payload))).unwrap()
    };
    assert_eq!(rt.run_turn(id, None).unwrap(), TurnOutcome::Yielded(1));
    let mut outputs = rt.take_outputs(id);
    let watch_id = match outputs.iter().find_map(|o| match o {
        Output::Call(HostCall::Request { id, .. }) => Some(*id),
        _ => None,
    }) {
        Some(w) => w,
        None => panic!("counter issued no watch: {outputs:?}"),
    };
    let mut answered = 0;
    let mut outstanding: VecDeque<u64> = VecDeque::new();
    let collect = |rt: &mut Runtime, outputs: &mut Vec<Output>, outstanding: &mut VecDeque<u64>| {
        let new = rt.take_outputs(id);
        for o in &new {
            if let Output::Call(c) = o {
                if c.id() != watch_id {
                    outstanding.push_back(c.id());
                }
            }
        }
        outputs.extend(new);
    };
    for (i, &nonce) in nonces.iter().enumerate() {
        let outcome = deliver(rt, watch_id, event_payload("ns-1", "r", nonce, i as u64 + 1));
        assert!(matches!(outcome, TurnOutcome::Yielded(_)), "{outcome:?}");
        collect(rt, &mut outputs, &mut outstanding);
        while let Some(aid) = outstanding.pop_front() {
            answered += 1;
            let outcome = deliver(rt, aid, ok_payload());
            assert!(matches!(outcome, TurnOutcome::Yielded(_)), "{outcome:?}");
            collect(rt, &mut outputs, &mut outstanding);
        }
    }
    assert!(answered >= nonces.len());
    outputs
}

pub fn logs(outputs: &[Output]) -> Vec<String> {
    outputs
        .iter()
        .filter_map(|o| match o {
            Output::Log(l) => Some(l.clone()),
            _ => None,
        })
        .collect()
}

/// Fixture with its own cache directory, for tests that count compilations.
pub fn private_fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let rt = Runtime::new(private_config(&dir), None).unwrap();
    Fixture { dir, rt }
}

pub fn private_config(dir: &TempDir) -> RuntimeConfig {
    let mut c = RuntimeConfig::new(dir.path().join("cache"), dir.path().join("snapshots"));
    c.capture_outputs = true;
    c
}
