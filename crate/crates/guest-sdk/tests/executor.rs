//! Drives guest programs natively with a scripted host.

use std::cell::RefCell;
use std::rc::Rc;

use guest_sdk::abi::resource::{EventType, TestResource, WatchEvent};
use guest_sdk::abi::{Envelope, Kind, Method};
use guest_sdk::client::{apply, get};
use guest_sdk::{delay, log, spawn, synthetic_reconcile, watch_testresources, Executor, Host, ReconcileContext};

#[derive(Default)]
struct Recorded {
    next_id: u64,
    requests: Vec<(u64, Envelope)>,
    delays: Vec<(u64, u64)>,
    logs: Vec<String>,
}

#[derive(Clone, Default)]
struct ScriptHost(Rc<RefCell<Recorded>>);

impl Host for ScriptHost {
    fn kube_request(&mut self, envelope: &[u8]) -> u64 {
        let mut r = self.0.borrow_mut();
        r.next_id += 1;
        let id = r.next_id;
        r.requests.push((id, Envelope::decode(envelope).unwrap()));
        id
    }

    fn delay(&mut self, millis: u64) -> u64 {
        let mut r = self.0.borrow_mut();
        r.next_id += 1;
        let id = r.next_id;
        r.delays.push((id, millis));
        id
    }

    fn log(&mut self, line: &str) {
        self.0.borrow_mut().logs.push(line.to_owned());
    }
}

fn setup() -> (Executor, ScriptHost) {
    let host = ScriptHost::default();
    (Executor::new(Box::new(host.clone())), host)
}

fn ok(body: Vec<u8>) -> Vec<u8> {
    Envelope::response(200, body).encode().unwrap()
}

fn event(ty: EventType, ns: &str, name: &str, nonce: u64, rv: u64) -> Vec<u8> {
    let ev = WatchEvent { event_type: ty, object: TestResource::new(ns, name, nonce).with_resource_version(rv) };
    Envelope::watch_event(ev.to_json()).encode().unwrap()
}

#[test]
fn program_without_host_calls_finishes_in_one_turn() {
    let (exec, host) = setup();
    exec.spawn(async { log("hello") });
    exec.run_until_stalled();
    assert!(exec.is_finished());
    assert!(exec.pending_ids().is_empty());
    assert_eq!(host.0.borrow().logs, ["hello"]);
}

#[test]
fn one_request_yields_with_one_pending_id() {
    let (exec, host) = setup();
    let out = Rc::new(RefCell::new(None));
    let o = Rc::clone(&out);
    exec.spawn(async move {
        *o.borrow_mut() = Some(get("ns", "r").await);
    });
    exec.run_until_stalled();
    assert_eq!(exec.pending_ids(), [1]);
    assert_eq!(exec.stuck_tasks(), 0);
    let (_, req) = &host.0.borrow().requests[0];
    assert_eq!((req.kind, req.method), (Kind::Request, Method::Get));
    assert_eq!(req.path, "/apis/test.dev/v1/namespaces/ns/testresources/r");

    exec.wakeup(1, ok(TestResource::new("ns", "r", 3).to_json()));
    assert!(exec.is_finished());
    assert_eq!(out.borrow().as_ref().unwrap().as_ref().unwrap().spec.nonce, 3);
}

#[test]
fn error_status_is_a_value() {
    let (exec, _host) = setup();
    let out = Rc::new(RefCell::new(None));
    let o = Rc::clone(&out);
    exec.spawn(async move {
        *o.borrow_mut() = Some(get("ns", "absent").await.unwrap_err().status());
    });
    exec.run_until_stalled();
    exec.wakeup(1, Envelope::response(404, b"{}".to_vec()).encode().unwrap());
    assert_eq!(*out.borrow(), Some(Some(404)));
}

#[test]
fn only_the_matching_task_resumes() {
    let (exec, host) = setup();
    exec.spawn(async {
        spawn(async {
            delay(10).await;
            log("a");
        });
        spawn(async {
            delay(20).await;
            log("b");
        });
    });
    exec.run_until_stalled();
    assert_eq!(host.0.borrow().delays, [(1, 10), (2, 20)]);
    assert_eq!(exec.task_count(), 2);

    exec.wakeup(2, ok(Vec::new()));
    assert_eq!(host.0.borrow().logs, ["b"]);
    assert_eq!(exec.pending_ids(), [1]);
    exec.wakeup(1, ok(Vec::new()));
    assert_eq!(host.0.borrow().logs, ["b", "a"]);
    assert!(exec.is_finished());
}

#[test]
#[should_panic(expected = "unknown async id")]
fn wakeup_for_unknown_id_is_fatal() {
    let (exec, _host) = setup();
    exec.spawn(async { delay(1).await });
    exec.run_until_stalled();
    exec.wakeup(99, ok(Vec::new()));
}

#[test]
fn watch_streams_until_closed() {
    let (exec, host) = setup();
    let seen = Rc::new(RefCell::new(Vec::new()));
    let s = Rc::clone(&seen);
    exec.spawn(async move {
        let mut w = watch_testresources("ns-1", 0);
        while let Some(ev) = w.next().await {
            s.borrow_mut().push(ev.map(|e| e.object.spec.nonce).map_err(|e| e.to_string()));
        }
        log(&format!("closed {:?}", w.closed_status()));
    });
    exec.run_until_stalled();
    assert_eq!(host.0.borrow().requests[0].1.path, "/apis/test.dev/v1/namespaces/ns-1/testresources?resourceVersion=0");
    exec.wakeup(1, event(EventType::Added, "ns-1", "a", 1, 1));
    exec.wakeup(1, Envelope::watch_event(b"not json".to_vec()).encode().unwrap());
    exec.wakeup(1, event(EventType::Modified, "ns-1", "a", 2, 2));
    assert_eq!(exec.pending_ids(), [1], "stream stays pending between events");
    exec.wakeup(1, Envelope::stream_closed(410, b"gone".to_vec()).encode().unwrap());
    assert!(exec.is_finished());
    assert!(exec.pending_ids().is_empty());
    let seen = seen.borrow();
    assert_eq!(seen[0], Ok(1));
    assert!(seen[1].is_err());
    assert_eq!(seen[2], Ok(2));
    assert_eq!(host.0.borrow().logs, ["closed Some(410)"]);
}

#[test]
fn several_queued_events_drain_in_one_turn() {
    let (exec, _host) = setup();
    let count = Rc::new(RefCell::new(0));
    let c = Rc::clone(&count);
    exec.spawn(async move {
        let mut w = watch_testresources("ns", 0);
        while w.next().await.is_some() {
            *c.borrow_mut() += 1;
        }
    });
    exec.run_until_stalled();
    for rv in 1..=5 {
        exec.wakeup(1, event(EventType::Added, "ns", &format!("r{rv}"), rv, rv));
    }
    assert_eq!(*count.borrow(), 5);
}

/// Plays a fixed completion script against the synthetic controller and
/// returns every request it issued.
fn synthetic_script() -> Vec<(u64, Envelope)> {
    let (exec, host) = setup();
    let ctx = ReconcileContext {
        source_namespace: "ns-1".into(),
        destination_namespace: "ns-2".into(),
        heap_ballast_bytes: 64 * 1024,
    };
    exec.spawn(synthetic_reconcile(ctx));
    exec.run_until_stalled();
    let mut rv = 0;
    let mut deliver_event = |exec: &Executor, ty, name: &str, nonce| {
        rv += 1;
        exec.wakeup(1, event(ty, "ns-1", name, nonce, rv));
    };
    let answer_last = |exec: &Executor, host: &ScriptHost| {
        let (id, req) = host.0.borrow().requests.last().cloned().unwrap();
        let r: TestResource = serde_json::from_slice(&req.body).unwrap();
        exec.wakeup(id, ok(r.with_resource_version(100 + id).to_json()));
    };
    deliver_event(&exec, EventType::Added, "r", 5);
    answer_last(&exec, &host);
    // Re-delivery of an already propagated nonce: no new request.
    deliver_event(&exec, EventType::Modified, "r", 5);
    deliver_event(&exec, EventType::Modified, "r", 6);
    // A second event arrives while the apply for nonce 6 is in flight.
    deliver_event(&exec, EventType::Modified, "r", 7);
    answer_last(&exec, &host);
    answer_last(&exec, &host);
    deliver_event(&exec, EventType::Deleted, "r", 7);
    let requests = host.0.borrow().requests.clone();
    requests
}

#[test]
fn synthetic_reconcile_propagates_and_skips_redeliveries() {
    let requests = synthetic_script();
    let applied: Vec<(String, u64)> = requests[1..]
        .iter()
        .map(|(_, r)| {
            assert_eq!(r.method, Method::Put);
            let body: TestResource = serde_json::from_slice(&r.body).unwrap();
            (r.path.clone(), body.spec.nonce)
        })
        .collect();
    let path = "/apis/test.dev/v1/namespaces/ns-2/testresources/r".to_string();
    assert_eq!(applied, [(path.clone(), 5), (path.clone(), 6), (path, 7)]);
}

#[test]
fn replay_of_the_same_script_is_deterministic() {
    assert_eq!(synthetic_script(), synthetic_script());
}

#[test]
fn no_events_means_no_applies() {
    let (exec, host) = setup();
    exec.spawn(synthetic_reconcile(ReconcileContext::from_json(br#"{"source":"a","dest":"b"}"#).unwrap()));
    exec.run_until_stalled();
    assert_eq!(host.0.borrow().requests.len(), 1);
    assert_eq!(host.0.borrow().requests[0].1.method, Method::Watch);
}

#[test]
fn apply_failure_is_logged_and_reconcile_continues() {
    let (exec, host) = setup();
    exec.spawn(async {
        let err = apply("ns", "r", 1).await.unwrap_err();
        log(&err.to_string());
    });
    exec.run_until_stalled();
    exec.wakeup(1, Envelope::response(503, b"unavailable".to_vec()).encode().unwrap());
    assert_eq!(host.0.borrow().logs, ["status 503: unavailable"]);
}
