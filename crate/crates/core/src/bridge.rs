//! Executes guest requests against a transport and turns every outcome into
//! a completion on the event-loop channel. Errors never cross the ABI as
//! anything other than a status-coded Response or StreamClosed.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use crossbeam_channel::Sender;
use futures::stream::{BoxStream, StreamExt};
use parking_lot::Mutex;
use serde::Serialize;
use tokio::runtime::Runtime as Tokio;
use tokio::task::AbortHandle;
use uuid::Uuid;
use wasm_operator_abi::resource::{collection_path, parse_path, WatchEvent};
use wasm_operator_abi::{Envelope, Method};
use wasm_operator_apiserver::{status_body, ApiServer};

use crate::queue::{Completion, LoopMessage};

/// Attempts after the first one before a request is answered with 503.
pub const RETRIES: u32 = 3;
const RETRY_PAUSE: Duration = Duration::from_millis(100);
/// Consecutive failed (re)connections after which a watch is closed.
const WATCH_RECONNECTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError(pub String);

impl fmt::Display for TransportError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for TransportError {}

/// Watch event bodies (`{"type":..,"object":..}` JSON), one per item.
pub type EventStream = BoxStream<'static, Result<Vec<u8>, TransportError>>;

#[async_trait]
pub trait Transport: Send + Sync {
    /// Performs one request. HTTP error statuses are `Ok`; `Err` means the
    /// request could not be carried out at all.
    async fn request(&self, method: Method, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>), TransportError>;

    /// Opens a watch on a namespace, replaying events newer than `from_version`.
    async fn watch(&self, namespace: &str, from_version: u64) -> Result<EventStream, TransportError>;
}

/// The built-in mock server, called directly.
pub struct InProcess(pub Arc<ApiServer>);

#[async_trait]
impl Transport for InProcess {
    async fn request(&self, method: Method, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>), TransportError> {
        let reply = self.0.handle(method, path, body);
        Ok((reply.status, reply.body))
    }

    async fn watch(&self, namespace: &str, from_version: u64) -> Result<EventStream, TransportError> {
        let stream = self.0.watch(namespace, from_version);
        Ok(stream.map(|e| Ok(e.to_watch_event().to_json())).boxed())
    }
}

/// A Kubernetes-style HTTP endpoint with optional bearer token.
pub struct RemoteHttp {
    base_url: String,
    token: Option<String>,
    client: reqwest::Client,
}

impl RemoteHttp {
    pub fn new(base_url: &str, token: Option<String>, tls_verify: bool) -> Result<Self, TransportError> {
        let client = reqwest::Client::builder()
            .danger_accept_invalid_certs(!tls_verify)
            .build()
            .map_err(|e| TransportError(format!("building http client: {e}")))?;
        Ok(RemoteHttp { base_url: base_url.trim_end_matches('/').to_owned(), token, client })
    }

    fn builder(&self, method: reqwest::Method, path: &str) -> reqwest::RequestBuilder {
        let mut b = self.client.request(method, format!("{}{path}", self.base_url));
        if let Some(token) = &self.token {
            b = b.bearer_auth(token);
        }
        b
    }
}

fn split_lines(body: BoxStream<'static, reqwest::Result<Vec<u8>>>) -> EventStream {
    futures::stream::unfold((body, Vec::<u8>::new(), false), |(mut body, mut buf, mut done)| async move {
        loop {
            if let Some(pos) = buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = buf.drain(..=pos).collect();
                let line = line[..line.len() - 1].to_vec();
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                return Some((Ok(line), (body, buf, done)));
            }
            if done {
                return None;
            }
            match body.next().await {
                Some(Ok(chunk)) => buf.extend_from_slice(&chunk),
                Some(Err(e)) => {
                    done = true;
                    return Some((Err(TransportError(e.to_string())), (body, buf, done)));
                }
                None => {
                    done = true;
                    if !buf.iter().all(u8::is_ascii_whitespace) {
                        buf.push(b'\n');
                    } else {
                        return None;
                    }
                }
            }
        }
    })
    .boxed()
}

#[async_trait]
impl Transport for RemoteHttp {
    async fn request(&self, method: Method, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>), TransportError> {
        let m = match method {
            Method::Get => reqwest::Method::GET,
            Method::Post => reqwest::Method::POST,
            Method::Put => reqwest::Method::PUT,
            Method::Delete => reqwest::Method::DELETE,
            Method::Patch => reqwest::Method::PATCH,
            Method::None | Method::Watch => return Err(TransportError(format!("{method:?} is not a plain request"))),
        };
        let resp = self
            .builder(m, path)
            .header("content-type", "application/json")
            .body(body.to_vec())
            .send()
            .await
            .map_err(|e| TransportError(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.bytes().await.map_err(|e| TransportError(e.to_string()))?;
        Ok((status, body.to_vec()))
    }

    async fn watch(&self, namespace: &str, from_version: u64) -> Result<EventStream, TransportError> {
        let path = format!("{}?watch=true&resourceVersion={from_version}", collection_path(namespace));
        let resp = self
            .builder(reqwest::Method::GET, &path)
            .send()
            .await
            .map_err(|e| TransportError(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(TransportError(format!("watch answered {}", resp.status())));
        }
        Ok(split_lines(resp.bytes_stream().map(|r| r.map(|b| b.to_vec())).boxed()))
    }
}

/// Wraps a transport and holds every plain request for a fixed time before
/// forwarding it. Watches are not delayed.
pub struct Delayed<T> {
    pub inner: T,
    pub delay: Duration,
}

#[async_trait]
impl<T: Transport> Transport for Delayed<T> {
    async fn request(&self, method: Method, path: &str, body: &[u8]) -> Result<(u16, Vec<u8>), TransportError> {
        tokio::time::sleep(self.delay).await;
        self.inner.request(method, path, body).await
    }

    async fn watch(&self, namespace: &str, from_version: u64) -> Result<EventStream, TransportError> {
        self.inner.watch(namespace, from_version).await
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BridgeStats {
    pub requests: u64,
    pub retries: u64,
    pub failed_requests: u64,
    pub watches_opened: u64,
    pub watch_events: u64,
    pub reconnects: u64,
    pub timers: u64,
}

#[derive(Default)]
struct Counters {
    requests: AtomicU64,
    retries: AtomicU64,
    failed_requests: AtomicU64,
    watches_opened: AtomicU64,
    watch_events: AtomicU64,
    reconnects: AtomicU64,
    timers: AtomicU64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Delivery end of one watch registration. Once closed, nothing more is sent
/// under its async id.
struct Sink {
    tx: Sender<LoopMessage>,
    instance: Uuid,
    async_id: u64,
    closed: Mutex<bool>,
}

impl Sink {
    fn send(&self, envelope: Envelope) {
        let payload = envelope.encode().expect("host-built envelopes are within limits");
        let _ = self.tx.send(LoopMessage::Completion(Completion { instance: self.instance, async_id: self.async_id, payload }));
    }

    fn event(&self, body: Vec<u8>) -> bool {
        let closed = self.closed.lock();
        if *closed {
            return false;
        }
        self.send(Envelope::watch_event(body));
        true
    }

    /// Returns false if the stream was already closed.
    fn close(&self, status: u16, reason: &str) -> bool {
        let mut closed = self.closed.lock();
        if *closed {
            return false;
        }
        *closed = true;
        self.send(Envelope::stream_closed(status, reason.as_bytes().to_vec()));
        true
    }
}

struct Registration {
    sink: Arc<Sink>,
    task: AbortHandle,
}

type Registry = Arc<Mutex<HashMap<(Uuid, u64), Registration>>>;

/// Owns the IO runtime. `submit*` only spawn tasks and never wait on IO.
pub struct Bridge {
    tokio: Tokio,
    transport: Arc<dyn Transport>,
    tx: Sender<LoopMessage>,
    watches: Registry,
    counters: Arc<Counters>,
}

impl Bridge {
    pub fn new(transport: Arc<dyn Transport>, tx: Sender<LoopMessage>) -> std::io::Result<Self> {
        let tokio = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("wop-bridge")
            .enable_all()
            .build()?;
        Ok(Bridge { tokio, transport, tx, watches: Registry::default(), counters: Arc::default() })
    }

    pub fn tokio(&self) -> &tokio::runtime::Handle {
        self.tokio.handle()
    }

    fn complete(&self, instance: Uuid, async_id: u64, envelope: Envelope) {
        let payload = envelope.encode().expect("host-built envelopes are within limits");
        let _ = self.tx.send(LoopMessage::Completion(Completion { instance, async_id, payload }));
    }

    /// Answers a request the guest could not even encode properly.
    pub fn reject(&self, instance: Uuid, async_id: u64, reason: &str) {
        self.complete(instance, async_id, Envelope::response(400, status_body(400, "BadRequest", reason)));
    }

    pub fn submit(&self, instance: Uuid, async_id: u64, request: Envelope) {
        let target = parse_path(&request.path);
        if request.method == Method::Watch {
            match target {
                Ok(t) if t.name.is_none() => self.open_watch(instance, async_id, t.namespace, t.resource_version.unwrap_or(0)),
                Ok(_) => self.reject_watch(instance, async_id, "watch needs a collection path"),
                Err(e) => self.reject_watch(instance, async_id, &e.to_string()),
            }
            return;
        }
        if let Err(e) = target {
            self.reject(instance, async_id, &e.to_string());
            return;
        }
        bump(&self.counters.requests);
        let transport = Arc::clone(&self.transport);
        let tx = self.tx.clone();
        let counters = Arc::clone(&self.counters);
        self.tokio.spawn(async move {
            let mut attempt = 0;
            let envelope = loop {
                match transport.request(request.method, &request.path, &request.body).await {
                    Ok((status, body)) => break Envelope::response(status, body),
                    Err(e) if attempt < RETRIES => {
                        attempt += 1;
                        bump(&counters.retries);
                        tracing::debug!(%instance, async_id, "request failed, retrying: {e}");
                        tokio::time::sleep(RETRY_PAUSE).await;
                    }
                    Err(e) => {
                        bump(&counters.failed_requests);
                        break Envelope::response(503, status_body(503, "ServiceUnavailable", &e.to_string()));
                    }
                }
            };
            let payload = envelope.encode().expect("responses fit the default limits");
            let _ = tx.send(LoopMessage::Completion(Completion { instance, async_id, payload }));
        });
    }

    fn reject_watch(&self, instance: Uuid, async_id: u64, reason: &str) {
        self.complete(instance, async_id, Envelope::stream_closed(400, reason.as_bytes().to_vec()));
    }

    pub fn submit_timer(&self, instance: Uuid, async_id: u64, millis: u64) {
        bump(&self.counters.timers);
        let tx = self.tx.clone();
        self.tokio.spawn(async move {
            tokio::time::sleep(Duration::from_millis(millis)).await;
            let payload = Envelope::response(200, Vec::new()).encode().expect("empty response encodes");
            let _ = tx.send(LoopMessage::Completion(Completion { instance, async_id, payload }));
        });
    }

    fn open_watch(&self, instance: Uuid, async_id: u64, namespace: String, from_version: u64) {
        bump(&self.counters.watches_opened);
        let sink = Arc::new(Sink { tx: self.tx.clone(), instance, async_id, closed: Mutex::new(false) });
        let transport = Arc::clone(&self.transport);
        let counters = Arc::clone(&self.counters);
        let watches = Arc::clone(&self.watches);
        let task_sink = Arc::clone(&sink);
        // Hold the registry lock across spawn so the task cannot finish and
        // deregister before it is registered.
        let mut registry = self.watches.lock();
        let task = self.tokio.spawn(async move {
            run_watch(&*transport, &task_sink, &namespace, from_version, &counters).await;
            watches.lock().remove(&(instance, async_id));
        });
        registry.insert((instance, async_id), Registration { sink, task: task.abort_handle() });
    }

    /// Closes every live watch of `instance`, each with a StreamClosed(410)
    /// completion. Returns how many were closed.
    pub fn cancel_streams(&self, instance: Uuid) -> usize {
        let mut registry = self.watches.lock();
        let keys: Vec<_> = registry.keys().filter(|(i, _)| *i == instance).copied().collect();
        let mut closed = 0;
        for key in keys {
            let reg = registry.remove(&key).expect("key just listed");
            reg.task.abort();
            if reg.sink.close(410, "cancelled") {
                closed += 1;
            }
        }
        closed
    }

    pub fn live_watches(&self) -> usize {
        self.watches.lock().len()
    }

    pub fn stats(&self) -> BridgeStats {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        BridgeStats {
            requests: get(&c.requests),
            retries: get(&c.retries),
            failed_requests: get(&c.failed_requests),
            watches_opened: get(&c.watches_opened),
            watch_events: get(&c.watch_events),
            reconnects: get(&c.reconnects),
            timers: get(&c.timers),
        }
    }
}

/// Forwards events in strictly increasing resourceVersion order, resuming
/// from the last delivered version when the underlying stream drops.
async fn run_watch(transport: &dyn Transport, sink: &Sink, namespace: &str, from_version: u64, counters: &Counters) {
    let mut last = from_version;
    let mut failures = 0;
    loop {
        let (status, reason) = match transport.watch(namespace, last).await {
            Ok(mut events) => {
                let mut error = None;
                while let Some(item) = events.next().await {
                    match item {
                        Ok(body) => {
                            failures = 0;
                            let rv = WatchEvent::from_json(&body).ok().and_then(|e| e.object.resource_version());
                            if let Some(rv) = rv {
                                if rv <= last {
                                    continue;
                                }
                                last = rv;
                            }
                            if !sink.event(body) {
                                return;
                            }
                            bump(&counters.watch_events);
                        }
                        Err(e) => {
                            error = Some(e);
                            break;
                        }
                    }
                }
                match error {
                    Some(e) => (503, e.to_string()),
                    None => (410, "watch ended by server".to_owned()),
                }
            }
            Err(e) => (503, e.to_string()),
        };
        failures += 1;
        if failures > WATCH_RECONNECTS {
            sink.close(status, &reason);
            return;
        }
        bump(&counters.reconnects);
        tracing::debug!(instance = %sink.instance, async_id = sink.async_id, "watch dropped ({reason}), reconnecting from {last}");
        tokio::time::sleep(RETRY_PAUSE).await;
    }
}
