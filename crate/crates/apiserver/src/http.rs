//! Optional HTTP exposure of the store, mirroring the Kubernetes paths.
//! Watches are `GET ...?watch=true&resourceVersion=N` answered with
//! newline-delimited JSON events.

use std::convert::Infallible;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, Method as HttpMethod, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;
use futures::StreamExt;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;
use wasm_operator_abi::resource::parse_path;
use wasm_operator_abi::Method;

use crate::rest::status_body;
use crate::store::ApiServer;

pub fn router(server: Arc<ApiServer>) -> Router {
    Router::new().fallback(dispatch).with_state(server)
}

async fn dispatch(State(server): State<Arc<ApiServer>>, method: HttpMethod, uri: Uri, body: Bytes) -> Response {
    let path = uri.path_and_query().map_or(uri.path(), |pq| pq.as_str());
    let method = match method {
        HttpMethod::GET => Method::Get,
        HttpMethod::POST => Method::Post,
        HttpMethod::PUT => Method::Put,
        HttpMethod::DELETE => Method::Delete,
        HttpMethod::PATCH => Method::Patch,
        _ => return json_response(405, status_body(405, "MethodNotAllowed", "unsupported method")),
    };
    if method == Method::Get {
        if let Ok(target) = parse_path(path) {
            if target.watch && target.name.is_none() {
                let events = server.watch(&target.namespace, target.resource_version.unwrap_or(0));
                let lines = events.map(|e| {
                    let mut line = e.to_watch_event().to_json();
                    line.push(b'\n');
                    Ok::<_, Infallible>(Bytes::from(line))
                });
                return (
                    [(header::CONTENT_TYPE, "application/json")],
                    Body::from_stream(lines),
                )
                    .into_response();
            }
        }
    }
    let reply = server.handle(method, path, &body);
    json_response(reply.status, reply.body)
}

fn json_response(status: u16, body: Vec<u8>) -> Response {
    let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

pub struct HttpHandle {
    pub addr: SocketAddr,
    pub task: JoinHandle<io::Result<()>>,
}

/// Binds `addr` and serves in the background on the current tokio runtime.
pub async fn spawn_http(server: Arc<ApiServer>, addr: SocketAddr) -> io::Result<HttpHandle> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    let task = tokio::spawn(async move { axum::serve(listener, router(server)).await });
    Ok(HttpHandle { addr, task })
}
