mod common;

use common::*;
use wasm_operator_core::instrument::ValidationError;
use wasm_operator_core::{ModuleHash, Runtime, RuntimeError};

#[test]
fn second_compile_is_a_memory_hit() {
    let mut f = private_fixture();
    let a = f.rt.compile_and_cache(guest_artifacts::SYNTHETIC_OPERATOR).unwrap();
    let b = f.rt.compile_and_cache(guest_artifacts::SYNTHETIC_OPERATOR).unwrap();
    assert_eq!(a, b);
    let stats = f.rt.cache().stats();
    assert_eq!(stats.compiles, 1);
    assert_eq!(stats.memory_hits, 1);
    assert!(f.rt.cache().artifact_path(&a).exists());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(f.rt.cache().meta_path(&a)).unwrap()).unwrap();
    assert_eq!(meta["source_len"], guest_artifacts::SYNTHETIC_OPERATOR.len());
    assert!(meta["engine_version"].as_str().unwrap().starts_with("wasmtime"));
}

#[test]
fn artifacts_are_reused_across_runtimes() {
    let f = private_fixture();
    let dir = f.dir;
    drop(f.rt);
    let mut first = Runtime::new(private_config(&dir), None).unwrap();
    let hash = first.compile_and_cache(guest_artifacts::REFERENCE_GUESTS).unwrap();
    drop(first);
    let mut second = Runtime::new(private_config(&dir), None).unwrap();
    assert_eq!(second.compile_and_cache(guest_artifacts::REFERENCE_GUESTS).unwrap(), hash);
    let stats = second.cache().stats();
    assert_eq!((stats.compiles, stats.disk_hits), (0, 1));
    // The deserialized artifact is runnable.
    let id = second.spawn(&hash, &program("finish")).unwrap();
    assert_eq!(second.run_turn(id, None).unwrap(), wasm_operator_core::TurnOutcome::Finished);
}

#[test]
fn missing_wakeup_names_the_symbol() {
    let mut f = private_fixture();
    let bytes = wat(&FINISH_WAT.replace(r#"(func (export "wakeup") (param i64 i32 i32))"#, ""));
    match f.rt.compile_and_cache(&bytes) {
        Err(RuntimeError::Validation(ValidationError::MissingExport(name))) => assert_eq!(name, "wakeup"),
        other => panic!("expected missing wakeup, got {other:?}"),
    }
}

#[test]
fn unknown_import_names_the_symbol() {
    let mut f = private_fixture();
    let bytes = wat(&FINISH_WAT.replace("(memory 1)", r#"(import "env" "socket" (func)) (memory 1)"#));
    let err = f.rt.compile_and_cache(&bytes).unwrap_err();
    match err {
        RuntimeError::Validation(v) => assert_eq!(v.symbol().as_deref(), Some("env::socket")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn one_data_byte_changes_the_hash() {
    let base = FINISH_WAT.replace("(memory 1)", r#"(memory 1) (data (i32.const 16) "abcdef")"#);
    let a = wat(&base);
    let b = wat(&base.replace("abcdef", "abcdeg"));
    assert_eq!(a.len(), b.len());
    assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1);
    let mut f = private_fixture();
    let ha = f.rt.compile_and_cache(&a).unwrap();
    let hb = f.rt.compile_and_cache(&b).unwrap();
    assert_ne!(ha, hb);
    assert_eq!(f.rt.cache().stats().compiles, 2);
}

#[test]
fn hash_is_a_pure_function_of_the_bytes() {
    let bytes = guest_artifacts::REFERENCE_GUESTS;
    assert_eq!(ModuleHash::of(bytes), ModuleHash::of(&bytes.to_vec()));
    let hex = ModuleHash::of(bytes).to_hex();
    assert_eq!(hex.len(), 64);
    assert_eq!(ModuleHash::from_hex(&hex), Some(ModuleHash::of(bytes)));
}

#[test]
fn spawn_shares_one_artifact() {
    let mut f = private_fixture();
    let hash = f.rt.compile_and_cache(guest_artifacts::SYNTHETIC_OPERATOR).unwrap();
    let cfg = br#"{"source":"ns-1","dest":"ns-2","ballast_bytes":0}"#;
    let ids: Vec<_> = (0..100).map(|_| f.rt.spawn(&hash, cfg).unwrap()).collect();
    let unique: std::collections::HashSet<_> = ids.iter().collect();
    assert_eq!(unique.len(), 100);
    assert_eq!(f.rt.records().count(), 100);
    let artifacts = std::fs::read_dir(f.rt.cache().dir())
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "cwasm"))
        .count();
    assert_eq!(artifacts, 1);
    assert_eq!(f.rt.cache().stats().compiles, 1);
    for id in ids {
        assert!(!f.rt.record(id).unwrap().started, "start must wait for the first turn");
    }
}

#[test]
fn spawn_unknown_hash_is_not_found() {
    let mut f = private_fixture();
    let err = f.rt.spawn(&ModuleHash([7; 32]), b"").unwrap_err();
    assert!(matches!(err, RuntimeError::NotFound { .. }), "{err:?}");
}
