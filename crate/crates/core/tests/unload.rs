mod common;

use std::fs;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_operator_core::snapshot;
use wasm_operator_core::{InstanceState, RuntimeError};

#[test]
fn snapshot_records_memory_pages() {
    let mut f = fixture();
    let hash = f.rt.compile_and_cache(&wat(TICKER_WAT)).unwrap();
    let id = f.rt.spawn(&hash, b"").unwrap();
    f.rt.run_turn(id, None).unwrap();
    f.rt.run_turn(id, Some((1, ok_payload()))).unwrap();
    let path = f.rt.unload(id).unwrap();
    let snap = snapshot::read_file(&path).unwrap();
    assert_eq!(snap.header.memory_pages, 17);
    assert_eq!(snap.header.instance_id, id);
    assert_eq!(snap.header.pending, [2]);
    assert_eq!(&snap.memory[65536..65540], &1u32.to_le_bytes());
    let record = f.rt.record(id).unwrap();
    assert_eq!(record.state, InstanceState::Unloaded);
    assert_eq!(record.snapshot_path.as_deref(), Some(path.as_path()));
    assert!(record.counters.bytes_swapped >= 17 * 65536);
    assert!(f.rt.memory_image(id).is_none(), "no engine memory is held while unloaded");
}

#[test]
fn state_errors() {
    let mut f = fixture();
    let hash = f.rt.compile_and_cache(&wat(TICKER_WAT)).unwrap();
    let id = f.rt.spawn(&hash, b"").unwrap();
    f.rt.run_turn(id, None).unwrap();
    assert!(matches!(f.rt.reload(id), Err(RuntimeError::NotUnloaded(_))));
    f.rt.unload(id).unwrap();
    assert!(matches!(f.rt.unload(id), Err(RuntimeError::AlreadyUnloaded(_))));
    assert!(matches!(f.rt.run_turn(id, Some((1, ok_payload()))), Err(RuntimeError::NotLoaded(_))));
    f.rt.reload(id).unwrap();
    assert_eq!(f.rt.record(id).unwrap().state, InstanceState::Loaded);
}

#[test]
fn globals_and_memory_survive() {
    let mut f = fixture();
    let hash = f.rt.compile_and_cache(&wat(TICKER_WAT)).unwrap();
    let id = f.rt.spawn(&hash, b"").unwrap();
    f.rt.run_turn(id, None).unwrap();
    for aid in 1..=3 {
        f.rt.run_turn(id, Some((aid, ok_payload()))).unwrap();
    }
    let before = f.rt.memory_image(id).unwrap();
    let path = f.rt.unload(id).unwrap();
    f.rt.reload(id).unwrap();
    assert!(!path.exists(), "snapshot is deleted after a successful reload");
    assert_eq!(f.rt.memory_image(id).unwrap(), before);
    // The global counter continues from 3.
    f.rt.run_turn(id, Some((4, ok_payload()))).unwrap();
    assert_eq!(&f.rt.memory_image(id).unwrap()[65536..65540], &4u32.to_le_bytes());
    assert_eq!(f.rt.record(id).unwrap().pending.keys().copied().collect::<Vec<_>>(), [5]);
}

#[test]
fn counter_value_survives_unload() {
    let mut f = fixture();
    let hash = reference(&mut f.rt);
    let id = f.rt.spawn(&hash, &program("counter")).unwrap();
    drive_counter(&mut f.rt, id, &[1, 2, 3, 4, 5, 6, 7], || false);
    f.rt.unload(id).unwrap();
    f.rt.reload(id).unwrap();
    f.rt.run_turn(id, Some((1, event_payload("ns-1", "r", 8, 8)))).unwrap();
    let logs = logs(&f.rt.take_outputs(id));
    assert!(logs[0].starts_with("counter=8 nonce=8 "), "{logs:?}");
}

#[test]
fn compressed_snapshots_round_trip() {
    let mut f = fixture_with(|c| c.compress_snapshots = true, None);
    let hash = reference(&mut f.rt);
    let id = f.rt.spawn(&hash, &program("counter")).unwrap();
    drive_counter(&mut f.rt, id, &[1, 2], || false);
    let before = f.rt.memory_image(id).unwrap();
    let path = f.rt.unload(id).unwrap();
    assert!(fs::metadata(&path).unwrap().len() < before.len() as u64 / 2);
    f.rt.reload(id).unwrap();
    assert_eq!(f.rt.memory_image(id).unwrap(), before);
}

fn unloaded_counter() -> (Fixture, uuid::Uuid, std::path::PathBuf) {
    let mut f = fixture();
    let hash = reference(&mut f.rt);
    let id = f.rt.spawn(&hash, &program("counter")).unwrap();
    drive_counter(&mut f.rt, id, &[1, 2], || false);
    let path = f.rt.unload(id).unwrap();
    (f, id, path)
}

#[test]
fn truncated_snapshot_is_corrupt() {
    let (mut f, id, path) = unloaded_counter();
    let bytes = fs::read(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cut = rng.gen_range(0..bytes.len());
    fs::write(&path, &bytes[..cut]).unwrap();
    match f.rt.reload(id) {
        Err(RuntimeError::CorruptSnapshot { instance, path: p, .. }) => {
            assert_eq!(instance, id);
            assert_eq!(p, path);
        }
        other => panic!("expected CorruptSnapshot, got {other:?}"),
    }
    assert_eq!(f.rt.record(id).unwrap().state, InstanceState::Failed);
    assert!(path.exists(), "corrupt snapshot is kept for inspection");
}

#[test]
fn missing_snapshot_fails_the_instance() {
    let (mut f, id, path) = unloaded_counter();
    fs::remove_file(&path).unwrap();
    assert!(matches!(f.rt.reload(id), Err(RuntimeError::Io { .. })));
    assert_eq!(f.rt.record(id).unwrap().state, InstanceState::Failed);
}

#[test]
fn snapshot_of_another_instance_is_rejected() {
    let mut f = fixture();
    let hash = reference(&mut f.rt);
    let a = f.rt.spawn(&hash, &program("counter")).unwrap();
    let b = f.rt.spawn(&hash, &program("counter")).unwrap();
    f.rt.run_turn(a, None).unwrap();
    f.rt.run_turn(b, None).unwrap();
    let pa = f.rt.unload(a).unwrap();
    let pb = f.rt.unload(b).unwrap();
    fs::copy(&pa, &pb).unwrap();
    assert!(matches!(f.rt.reload(b), Err(RuntimeError::CorruptSnapshot { .. })));
    f.rt.reload(a).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_corruption_is_detected(offset in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let (mut f, id, path) = unloaded_counter();
        let mut bytes = fs::read(&path).unwrap();
        let at = offset.index(bytes.len());
        bytes[at] ^= flip;
        fs::write(&path, &bytes).unwrap();
        let result = f.rt.reload(id);
        prop_assert!(matches!(result, Err(RuntimeError::CorruptSnapshot { .. })), "{:?}", result);
        prop_assert_eq!(f.rt.record(id).unwrap().state, InstanceState::Failed);
    }

    #[test]
    fn unload_points_do_not_change_outputs(
        nonces in prop::collection::vec(1u64..1000, 1..12),
        mask in any::<u64>(),
    ) {
        let mut reference_run = fixture();
        let hash = reference(&mut reference_run.rt);
        let id = reference_run.rt.spawn(&hash, &program("counter")).unwrap();
        let expected = drive_counter(&mut reference_run.rt, id, &nonces, || false);

        let mut swapped = fixture();
        let hash = reference(&mut swapped.rt);
        let id = swapped.rt.spawn(&hash, &program("counter")).unwrap();
        let mut step = 0u32;
        let actual = drive_counter(&mut swapped.rt, id, &nonces, || {
            step += 1;
            mask.rotate_left(step) & 1 == 1
        });
        prop_assert_eq!(actual, expected);
        prop_assert!(swapped.rt.record(id).unwrap().counters.unloads > 0 || mask == 0 || nonces.len() < 2);
    }
}

#[test]
fn unloaded_instance_reloads_on_pump() {
    use std::time::Duration;
    use wasm_operator_core::UnloadPolicy;

    let mut f = fixture_with(|c| c.policy = UnloadPolicy::every_turn(), None);
    let hash = f.rt.compile_and_cache(&wat(TICKER_WAT)).unwrap();
    let id = f.rt.spawn(&hash, b"").unwrap();
    // Start turn runs inside pump and the policy unloads right after it.
    f.rt.pump(Some(Duration::from_millis(50)));
    assert_eq!(f.rt.record(id).unwrap().state, InstanceState::Unloaded);
    let tx = f.rt.sender();
    tx.send(wasm_operator_core::LoopMessage::Completion(wasm_operator_core::Completion {
        instance: id,
        async_id: 1,
        payload: ok_payload(),
    }))
    .unwrap();
    let turns = f.rt.pump(Some(Duration::from_millis(100)));
    assert_eq!(turns, 1);
    let record = f.rt.record(id).unwrap();
    assert_eq!(record.state, InstanceState::Unloaded);
    assert_eq!((record.counters.unloads, record.counters.reloads), (2, 1));
    assert_eq!(record.pending.keys().copied().collect::<Vec<_>>(), [2]);
}
