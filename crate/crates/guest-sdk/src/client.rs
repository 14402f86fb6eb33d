//! Awaitable host calls and the typed TestResource client.

use std::fmt;
use std::future::{poll_fn, Future};
use std::task::Poll;

use wasm_operator_abi::resource::{collection_path, item_path, watch_path, TestResource, WatchEvent};
use wasm_operator_abi::{DecodingError, Envelope, Kind, Method};

use crate::executor::{try_with_current, with_current};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KubeError {
    /// The server (or the bridge) answered with status >= 400.
    Status { status: u16, body: Vec<u8> },
    /// The completion payload was not a valid envelope.
    Envelope(DecodingError),
    /// The envelope body did not hold the expected JSON.
    Body(String),
    /// A watch stream ended while a response was expected.
    Closed { status: u16 },
}

impl KubeError {
    pub fn status(&self) -> Option<u16> {
        match self {
            KubeError::Status { status, .. } | KubeError::Closed { status } => Some(*status),
            _ => None,
        }
    }
}

impl fmt::Display for KubeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KubeError::Status { status, body } => {
                write!(f, "status {status}: {}", String::from_utf8_lossy(body))
            }
            KubeError::Envelope(e) => write!(f, "bad completion envelope: {e}"),
            KubeError::Body(e) => write!(f, "bad body: {e}"),
            KubeError::Closed { status } => write!(f, "stream closed with status {status}"),
        }
    }
}

impl std::error::Error for KubeError {}

/// Resolves with the next payload delivered for `id`.
struct Completion {
    id: u64,
    done: bool,
}

impl Completion {
    fn next(&mut self) -> impl Future<Output = Vec<u8>> + '_ {
        poll_fn(move |_| match with_current(|inner, _| inner.take(self.id)) {
            Some(payload) => Poll::Ready(payload),
            None => Poll::Pending,
        })
    }
}

impl Drop for Completion {
    fn drop(&mut self) {
        if !self.done {
            try_with_current(|inner, _| inner.release(self.id));
        }
    }
}

fn submit(envelope: &Envelope, stream: bool) -> Completion {
    let bytes = envelope.encode().expect("request envelope within limits");
    let id = with_current(|inner, task| {
        let id = inner.host().kube_request(&bytes);
        inner.register(id, task, stream);
        id
    });
    Completion { id, done: false }
}

/// Sends one request and waits for its response. Status >= 400 is an error.
pub async fn kube_call(request: Envelope) -> Result<Envelope, KubeError> {
    let mut c = submit(&request, false);
    let payload = c.next().await;
    c.done = true;
    let response = Envelope::decode(&payload).map_err(KubeError::Envelope)?;
    if response.kind == Kind::StreamClosed {
        return Err(KubeError::Closed { status: response.status });
    }
    if response.is_error() {
        return Err(KubeError::Status { status: response.status, body: response.body });
    }
    Ok(response)
}

/// Suspends the calling task for at least `millis` milliseconds.
pub async fn delay(millis: u64) {
    let id = with_current(|inner, task| {
        let id = inner.host().delay(millis);
        inner.register(id, task, false);
        id
    });
    let mut c = Completion { id, done: false };
    c.next().await;
    c.done = true;
}

/// Emits one diagnostic line through the host.
pub fn log(line: &str) {
    if try_with_current(|inner, _| inner.host().log(line)).is_none() {
        #[cfg(target_arch = "wasm32")]
        crate::host::ffi::log_line(line);
    }
}

fn resource_from(envelope: &Envelope) -> Result<TestResource, KubeError> {
    serde_json::from_slice(&envelope.body).map_err(|e| KubeError::Body(e.to_string()))
}

pub async fn get(namespace: &str, name: &str) -> Result<TestResource, KubeError> {
    resource_from(&kube_call(Envelope::request(Method::Get, item_path(namespace, name), Vec::new())).await?)
}

/// Create-or-update through PUT.
pub async fn apply(namespace: &str, name: &str, nonce: u64) -> Result<TestResource, KubeError> {
    let body = TestResource::new(namespace, name, nonce).to_json();
    resource_from(&kube_call(Envelope::request(Method::Put, item_path(namespace, name), body)).await?)
}

pub async fn create(namespace: &str, name: &str, nonce: u64) -> Result<TestResource, KubeError> {
    let body = TestResource::new(namespace, name, nonce).to_json();
    resource_from(&kube_call(Envelope::request(Method::Post, collection_path(namespace), body)).await?)
}

pub async fn delete(namespace: &str, name: &str) -> Result<(), KubeError> {
    kube_call(Envelope::request(Method::Delete, item_path(namespace, name), Vec::new())).await.map(drop)
}

/// An open watch on one namespace.
pub struct ResourceWatch {
    completion: Completion,
    closed: Option<u16>,
}

/// Opens a watch delivering every change in `namespace` newer than
/// `from_version`, in server order.
pub fn watch_testresources(namespace: &str, from_version: u64) -> ResourceWatch {
    let request = Envelope::request(Method::Watch, watch_path(namespace, from_version), Vec::new());
    ResourceWatch { completion: submit(&request, true), closed: None }
}

impl ResourceWatch {
    /// Next event; `None` once the stream is closed. A bad event body is
    /// reported as an error and the stream continues.
    pub async fn next(&mut self) -> Option<Result<WatchEvent, KubeError>> {
        if self.closed.is_some() {
            return None;
        }
        let payload = self.completion.next().await;
        let envelope = match Envelope::decode(&payload) {
            Ok(e) => e,
            Err(e) => return Some(Err(KubeError::Envelope(e))),
        };
        match envelope.kind {
            Kind::WatchEvent => {
                Some(WatchEvent::from_json(&envelope.body).map_err(|e| KubeError::Body(e.to_string())))
            }
            Kind::StreamClosed => {
                self.closed = Some(envelope.status);
                self.completion.done = true;
                with_current(|inner, _| inner.release(self.completion.id));
                None
            }
            _ if envelope.is_error() => Some(Err(KubeError::Status { status: envelope.status, body: envelope.body })),
            _ => Some(Err(KubeError::Body(format!("unexpected {:?} on a watch stream", envelope.kind)))),
        }
    }

    /// Status carried by StreamClosed, once seen.
    pub fn closed_status(&self) -> Option<u16> {
        self.closed
    }
}
