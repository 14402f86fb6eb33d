mod common;

use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use common::*;
use crossbeam_channel::{Receiver, RecvTimeoutError};
use uuid::Uuid;
use wasm_operator_abi::resource::{collection_path, item_path, watch_path, WatchEvent};
use wasm_operator_abi::{Envelope, Kind, Method};
use wasm_operator_apiserver::ApiServer;
use wasm_operator_core::bridge::EventStream;
use wasm_operator_core::{
    Bridge, Completion, Delayed, InProcess, InstanceState, LoopMessage, RemoteHttp, Transport, TransportError, UnloadPolicy,
};

fn bridge(transport: impl Transport + 'static) -> (Bridge, Receiver<LoopMessage>) {
    let (tx, rx) = crossbeam_channel::unbounded();
    (Bridge::new(Arc::new(transport), tx).unwrap(), rx)
}

fn next(rx: &Receiver<LoopMessage>, timeout: Duration) -> Option<(Completion, Envelope)> {
    match rx.recv_timeout(timeout) {
        Ok(LoopMessage::Completion(c)) => {
            let env = Envelope::decode(&c.payload).unwrap();
            Some((c, env))
        }
        Ok(_) => panic!("bridge sent a non-completion message"),
        Err(RecvTimeoutError::Timeout) => None,
        Err(e) => panic!("{e}"),
    }
}

const WAIT: Duration = Duration::from_secs(5);

fn request(method: Method, path: String) -> Envelope {
    Envelope::request(method, path, Vec::new())
}

#[test]
fn get_returns_the_stored_resource() {
    let server = Arc::new(ApiServer::new());
    server.apply("ns-1", "r", 9).unwrap();
    let (b, rx) = bridge(InProcess(server));
    let id = Uuid::new_v4();
    b.submit(id, 1, request(Method::Get, item_path("ns-1", "r")));
    let (c, env) = next(&rx, WAIT).unwrap();
    assert_eq!((c.instance, c.async_id), (id, 1));
    assert_eq!((env.kind, env.status), (Kind::Response, 200));
    let body: serde_json::Value = serde_json::from_slice(&env.body).unwrap();
    assert_eq!(body["spec"]["nonce"], 9);

    b.submit(id, 2, request(Method::Get, item_path("ns-1", "absent")));
    assert_eq!(next(&rx, WAIT).unwrap().1.status, 404);
}

#[test]
fn malformed_paths_complete_with_400() {
    let (b, rx) = bridge(InProcess(Arc::new(ApiServer::new())));
    let id = Uuid::new_v4();
    b.submit(id, 1, request(Method::Get, "/api/v1/pods".into()));
    // Answered synchronously, without touching the transport.
    let (_, env) = next(&rx, Duration::ZERO).unwrap();
    assert_eq!((env.kind, env.status), (Kind::Response, 400));
    b.submit(id, 2, request(Method::Watch, item_path("ns-1", "r")));
    let (_, env) = next(&rx, Duration::ZERO).unwrap();
    assert_eq!((env.kind, env.status), (Kind::StreamClosed, 400));
    b.reject(id, 3, "garbage");
    assert_eq!(next(&rx, Duration::ZERO).unwrap().1.status, 400);
}

#[test]
fn watch_replays_then_stays_live() {
    let server = Arc::new(ApiServer::new());
    server.apply("ns-1", "a", 1).unwrap();
    server.apply("ns-1", "b", 1).unwrap();
    let (b, rx) = bridge(InProcess(Arc::clone(&server)));
    let id = Uuid::new_v4();
    b.submit(id, 7, request(Method::Watch, watch_path("ns-1", 0)));
    for name in ["a", "b"] {
        let (c, env) = next(&rx, WAIT).unwrap();
        assert_eq!(c.async_id, 7);
        assert_eq!(env.kind, Kind::WatchEvent);
        assert_eq!(WatchEvent::from_json(&env.body).unwrap().object.metadata.name, name);
    }
    assert!(next(&rx, Duration::from_millis(100)).is_none());
    assert_eq!(b.live_watches(), 1);
    server.apply("ns-1", "a", 2).unwrap();
    let (_, env) = next(&rx, WAIT).unwrap();
    assert_eq!(WatchEvent::from_json(&env.body).unwrap().object.spec.nonce, 2);
}

#[test]
fn cancel_streams_closes_each_watch_once() {
    let server = Arc::new(ApiServer::new());
    let (b, rx) = bridge(InProcess(server));
    let id = Uuid::new_v4();
    let other = Uuid::new_v4();
    assert_eq!(b.cancel_streams(id), 0);
    for aid in 1..=3 {
        b.submit(id, aid, request(Method::Watch, watch_path(&format!("ns-{aid}"), 0)));
    }
    b.submit(other, 1, request(Method::Watch, watch_path("ns-1", 0)));
    assert_eq!(b.cancel_streams(id), 3);
    let mut closed: Vec<u64> = (0..3)
        .map(|_| {
            let (c, env) = next(&rx, WAIT).unwrap();
            assert_eq!(c.instance, id);
            assert_eq!((env.kind, env.status), (Kind::StreamClosed, 410));
            c.async_id
        })
        .collect();
    closed.sort_unstable();
    assert_eq!(closed, [1, 2, 3]);
    assert_eq!(b.cancel_streams(id), 0);
    assert!(next(&rx, Duration::from_millis(100)).is_none());
    assert_eq!(b.live_watches(), 1);
}

#[test]
fn submit_does_not_wait_for_the_transport() {
    let server = Arc::new(ApiServer::new());
    let (b, rx) = bridge(Delayed { inner: InProcess(server), delay: Duration::from_secs(1) });
    let id = Uuid::new_v4();
    let mut slowest = Duration::ZERO;
    let started = Instant::now();
    for aid in 1..=20 {
        let t = Instant::now();
        b.submit(id, aid, request(Method::Get, item_path("ns-1", "r")));
        slowest = slowest.max(t.elapsed());
    }
    assert!(slowest < Duration::from_millis(1), "slowest submit took {slowest:?}");
    for _ in 0..20 {
        assert_eq!(next(&rx, WAIT).unwrap().1.status, 404);
    }
    assert!(started.elapsed() >= Duration::from_secs(1));
}

struct Broken(AtomicU32);

#[async_trait]
impl Transport for Broken {
    async fn request(&self, _: Method, _: &str, _: &[u8]) -> Result<(u16, Vec<u8>), TransportError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(TransportError("connection refused".into()))
    }

    async fn watch(&self, _: &str, _: u64) -> Result<EventStream, TransportError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(TransportError("connection refused".into()))
    }
}

#[test]
fn transport_failures_become_503_completions() {
    let transport = Arc::new(Broken(AtomicU32::new(0)));
    let (tx, rx) = crossbeam_channel::unbounded();
    let b = Bridge::new(Arc::clone(&transport) as Arc<dyn Transport>, tx).unwrap();
    let id = Uuid::new_v4();
    b.submit(id, 1, request(Method::Get, item_path("ns-1", "r")));
    let (_, env) = next(&rx, WAIT).unwrap();
    assert_eq!((env.kind, env.status), (Kind::Response, 503));
    assert_eq!(transport.0.load(Ordering::SeqCst), 1 + wasm_operator_core::bridge::RETRIES);
    assert_eq!(b.stats().failed_requests, 1);

    b.submit(id, 2, request(Method::Watch, watch_path("ns-1", 0)));
    let (_, env) = next(&rx, WAIT).unwrap();
    assert_eq!((env.kind, env.status), (Kind::StreamClosed, 503));
    assert_eq!(b.live_watches(), 0);
}

/// Delivered resourceVersions must equal the server log filtered to the
/// namespace: strictly increasing, nothing missing. A tiny watch buffer
/// forces the server to drop the watcher, so this also covers resuming.
#[test]
fn watch_order_matches_the_server_log() {
    let server = Arc::new(ApiServer::with_watch_buffer(2));
    let (b, rx) = bridge(InProcess(Arc::clone(&server)));
    let id = Uuid::new_v4();
    server.apply("ns-1", "pre", 1).unwrap();
    b.submit(id, 1, request(Method::Watch, watch_path("ns-1", 0)));
    let writer = {
        let server = Arc::clone(&server);
        std::thread::spawn(move || {
            for i in 0..400u64 {
                let ns = if i % 3 == 0 { "ns-2" } else { "ns-1" };
                server.apply(ns, &format!("r{}", i % 7), i).unwrap();
                if i % 50 == 0 {
                    server.delete("ns-1", "r1");
                }
            }
        })
    };
    writer.join().unwrap();
    let expected: Vec<u64> =
        server.event_log().iter().filter(|e| e.record.namespace == "ns-1").map(|e| e.resource_version).collect();
    let mut seen = Vec::new();
    while seen.len() < expected.len() {
        let (_, env) = next(&rx, WAIT).expect("watch stalled");
        assert_eq!(env.kind, Kind::WatchEvent, "{:?}", String::from_utf8_lossy(&env.body));
        seen.push(WatchEvent::from_json(&env.body).unwrap().object.resource_version().unwrap());
    }
    assert_eq!(seen, expected);
    assert!(next(&rx, Duration::from_millis(100)).is_none());
}

#[test]
fn remote_http_transport() {
    let server = Arc::new(ApiServer::new());
    server.apply("ns-1", "a", 3).unwrap();
    let io = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
    let http = io
        .block_on(wasm_operator_apiserver::http::spawn_http(Arc::clone(&server), "127.0.0.1:0".parse().unwrap()))
        .unwrap();
    let remote = RemoteHttp::new(&format!("http://{}", http.addr), Some("token".into()), true).unwrap();
    let (b, rx) = bridge(remote);
    let id = Uuid::new_v4();
    b.submit(id, 1, request(Method::Get, item_path("ns-1", "a")));
    let (_, env) = next(&rx, WAIT).unwrap();
    assert_eq!(env.status, 200);
    b.submit(id, 2, request(Method::Watch, watch_path("ns-1", 0)));
    let (_, env) = next(&rx, WAIT).unwrap();
    assert_eq!(env.kind, Kind::WatchEvent);
    let body = wasm_operator_abi::resource::TestResource::new("ns-1", "b", 4).to_json();
    b.submit(id, 3, Envelope::request(Method::Post, collection_path("ns-1"), body));
    let mut got = Vec::new();
    while got.len() < 2 {
        let (c, env) = next(&rx, WAIT).unwrap();
        got.push((c.async_id, env.kind, env.status));
    }
    got.sort_unstable_by_key(|g| g.0);
    assert_eq!(got, [(2, Kind::WatchEvent, 200), (3, Kind::Response, 201)]);
    b.cancel_streams(id);
    http.task.abort();
}

fn synthetic_config(source: u32) -> Vec<u8> {
    format!(r#"{{"source":"ns-{source}","dest":"ns-{}","ballast_bytes":0}}"#, source + 1).into_bytes()
}

fn pump_until(f: &mut Fixture, limit: Duration, mut done: impl FnMut(&Fixture) -> bool) -> usize {
    let deadline = Instant::now() + limit;
    let mut turns = 0;
    while !done(f) {
        assert!(Instant::now() < deadline, "condition not reached in {limit:?}");
        turns += f.rt.pump(Some(Duration::from_millis(20)));
    }
    turns
}

#[test]
fn pump_propagates_end_to_end() {
    let server = Arc::new(ApiServer::new());
    let mut f = fixture_with(|_| {}, Some(Arc::new(InProcess(Arc::clone(&server)))));
    let hash = f.rt.compile_and_cache(guest_artifacts::SYNTHETIC_OPERATOR).unwrap();
    f.rt.spawn(&hash, &synthetic_config(1)).unwrap();
    server.apply("ns-1", "r", 5).unwrap();
    let s = Arc::clone(&server);
    let turns = pump_until(&mut f, WAIT, move |_| s.get("ns-2", "r").is_some_and(|r| r.spec_nonce == 5));
    assert!(turns >= 2, "{turns}");
}

#[test]
fn pump_without_instances_returns_immediately() {
    let mut f = fixture();
    let t = Instant::now();
    assert_eq!(f.rt.pump(Some(Duration::from_secs(10))), 0);
    assert!(t.elapsed() < Duration::from_millis(100));
}

#[test]
fn chain_of_three_under_every_turn_unloading() {
    let server = Arc::new(ApiServer::new());
    let mut f = fixture_with(|c| c.policy = UnloadPolicy::every_turn(), Some(Arc::new(InProcess(Arc::clone(&server)))));
    let hash = f.rt.compile_and_cache(guest_artifacts::SYNTHETIC_OPERATOR).unwrap();
    for i in 1..=3 {
        f.rt.spawn(&hash, &synthetic_config(i)).unwrap();
    }
    for nonce in 1..=3 {
        server.apply("ns-1", "r", nonce).unwrap();
        let s = Arc::clone(&server);
        pump_until(&mut f, WAIT, move |_| s.get("ns-4", "r").is_some_and(|r| r.spec_nonce == nonce));
    }
    // Let trailing apply responses arrive; afterwards everything is swapped out.
    f.rt.pump(Some(Duration::from_millis(200)));
    assert!(f.rt.records().all(|r| r.state == InstanceState::Unloaded));
    assert!(f.rt.records().all(|r| r.counters.reloads >= 3));
    let m = f.rt.metrics();
    assert_eq!(m.queue.violations, 0);
    assert_eq!(m.dropped_completions, 0);
}

#[test]
fn idle_timeout_unloads_quiet_instances() {
    let server = Arc::new(ApiServer::new());
    let mut f = fixture_with(
        |c| c.policy = UnloadPolicy::idle_timeout(Duration::from_millis(200)),
        Some(Arc::new(InProcess(Arc::clone(&server)))),
    );
    let hash = f.rt.compile_and_cache(guest_artifacts::SYNTHETIC_OPERATOR).unwrap();
    let id = f.rt.spawn(&hash, &synthetic_config(1)).unwrap();
    f.rt.pump(Some(Duration::from_millis(50)));
    assert_eq!(f.rt.record(id).unwrap().state, InstanceState::Loaded);
    f.rt.pump(Some(Duration::from_millis(400)));
    assert_eq!(f.rt.record(id).unwrap().state, InstanceState::Unloaded);
    // A watch event brings it back.
    server.apply("ns-1", "r", 1).unwrap();
    let s = Arc::clone(&server);
    pump_until(&mut f, WAIT, move |_| s.get("ns-2", "r").is_some());
    assert!(f.rt.record(id).unwrap().counters.reloads >= 1);
}

#[test]
fn trapped_instance_streams_are_cancelled() {
    let server = Arc::new(ApiServer::new());
    let mut f = fixture_with(|_| {}, Some(Arc::new(InProcess(Arc::clone(&server)))));
    let hash = reference(&mut f.rt);
    let doomed = f.rt.spawn(&hash, &program("panic-on-event")).unwrap();
    let healthy = f.rt.spawn(&hash, &synthetic_like_counter()).unwrap();
    f.rt.pump(Some(Duration::from_millis(50)));
    assert_eq!(f.rt.bridge().unwrap().live_watches(), 2);
    server.apply("ns-1", "r", 1).unwrap();
    pump_until(&mut f, WAIT, |f| f.rt.record(doomed).unwrap().state == InstanceState::Failed);
    f.rt.pump(Some(Duration::from_millis(100)));
    assert_eq!(f.rt.bridge().unwrap().live_watches(), 1);
    assert_eq!(f.rt.record(healthy).unwrap().state, InstanceState::Loaded);
    let m = f.rt.metrics();
    assert_eq!(m.failed, 1);
    assert_eq!(m.queue.violations, 0);
}

fn synthetic_like_counter() -> Vec<u8> {
    br#"{"program":"counter","namespace":"ns-1","dest":"ns-2"}"#.to_vec()
}

#[test]
fn timers_complete_through_the_loop() {
    let server = Arc::new(ApiServer::new());
    let mut f = fixture_with(|_| {}, Some(Arc::new(InProcess(server))));
    let hash = reference(&mut f.rt);
    let id = f.rt.spawn(&hash, &program("two-task")).unwrap();
    let t = Instant::now();
    f.rt.pump(Some(WAIT));
    assert!(t.elapsed() >= Duration::from_millis(200));
    assert!(f.rt.record(id).is_none(), "finished");
    assert_eq!(logs(&f.rt.take_outputs(id)), ["resumed fast", "resumed slow"]);
}

#[test]
fn conservation_over_a_busy_run() {
    let server = Arc::new(ApiServer::new());
    let mut f = fixture_with(|_| {}, Some(Arc::new(InProcess(Arc::clone(&server)))));
    let hash = reference(&mut f.rt);
    let ids: Vec<_> = (0..4).map(|_| f.rt.spawn(&hash, &synthetic_like_counter()).unwrap()).collect();
    for nonce in 1..=30 {
        server.apply("ns-1", "r", nonce).unwrap();
    }
    pump_until(&mut f, Duration::from_secs(20), |f| {
        f.rt.records().all(|r| r.counters.turns > 30 && r.pending.len() == 1)
    });
    for id in &ids {
        assert_eq!(f.rt.bridge().unwrap().cancel_streams(*id), 1);
    }
    pump_until(&mut f, WAIT, |f| f.rt.records().count() == 0);
    let q = f.rt.metrics().queue;
    assert_eq!(q.live, 0);
    assert_eq!(q.issued, q.resolved);
    assert_eq!(q.violations, 0);
    assert_eq!(f.rt.metrics().finished, 4);
}
