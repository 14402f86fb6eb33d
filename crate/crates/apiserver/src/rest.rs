//! Maps Kubernetes-style REST requests onto the store. Shared by the HTTP
//! listener and the in-process transport so both speak the same dialect.

use serde::Deserialize;
use serde_json::json;
use wasm_operator_abi::resource::{parse_path, TestResource, API_VERSION};
use wasm_operator_abi::Method;

use crate::store::ApiServer;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RestResponse {
    pub status: u16,
    pub body: Vec<u8>,
}

impl RestResponse {
    fn json(status: u16, value: serde_json::Value) -> Self {
        RestResponse { status, body: serde_json::to_vec(&value).expect("json value serializes") }
    }

    fn resource(status: u16, r: TestResource) -> Self {
        RestResponse { status, body: r.to_json() }
    }
}

/// Kubernetes `Status` failure document.
pub fn status_body(code: u16, reason: &str, message: &str) -> Vec<u8> {
    serde_json::to_vec(&json!({
        "apiVersion": "v1",
        "kind": "Status",
        "status": "Failure",
        "reason": reason,
        "message": message,
        "code": code,
    }))
    .expect("status serializes")
}

fn failure(code: u16, reason: &str, message: impl AsRef<str>) -> RestResponse {
    RestResponse { status: code, body: status_body(code, reason, message.as_ref()) }
}

#[derive(Deserialize)]
struct PatchBody {
    spec: PatchSpec,
}

#[derive(Deserialize)]
struct PatchSpec {
    nonce: u64,
}

impl ApiServer {
    /// Executes one non-watch request. Watches go through [`ApiServer::watch`].
    pub fn handle(&self, method: Method, path: &str, body: &[u8]) -> RestResponse {
        let target = match parse_path(path) {
            Ok(t) => t,
            Err(e) => return failure(400, "BadRequest", e.to_string()),
        };
        let ns = target.namespace.as_str();
        match (method, target.name.as_deref()) {
            (Method::Get, Some(name)) => match self.get(ns, name) {
                Some(r) => RestResponse::resource(200, r.to_resource()),
                None => failure(404, "NotFound", format!("testresources \"{name}\" not found")),
            },
            (Method::Get, None) => {
                let items: Vec<TestResource> = self.list(ns).iter().map(|r| r.to_resource()).collect();
                RestResponse::json(
                    200,
                    json!({
                        "apiVersion": API_VERSION,
                        "kind": "TestResourceList",
                        "metadata": {"resourceVersion": self.latest_version().to_string()},
                        "items": items,
                    }),
                )
            }
            (Method::Put, Some(name)) => {
                let r: TestResource = match serde_json::from_slice(body) {
                    Ok(r) => r,
                    Err(e) => return failure(400, "BadRequest", format!("invalid body: {e}")),
                };
                if !r.metadata.name.is_empty() && r.metadata.name != name
                    || !r.metadata.namespace.is_empty() && r.metadata.namespace != ns
                {
                    return failure(400, "BadRequest", "metadata does not match the request path");
                }
                let existed = self.get(ns, name).is_some();
                match self.apply(ns, name, r.spec.nonce) {
                    Ok(rec) => RestResponse::resource(if existed { 200 } else { 201 }, rec.to_resource()),
                    Err(e) => failure(400, "BadRequest", e.to_string()),
                }
            }
            (Method::Post, None) => {
                let r: TestResource = match serde_json::from_slice(body) {
                    Ok(r) => r,
                    Err(e) => return failure(400, "BadRequest", format!("invalid body: {e}")),
                };
                if !r.metadata.namespace.is_empty() && r.metadata.namespace != ns {
                    return failure(400, "BadRequest", "metadata.namespace does not match the request path");
                }
                if self.get(ns, &r.metadata.name).is_some() {
                    return failure(409, "AlreadyExists", format!("testresources \"{}\" already exists", r.metadata.name));
                }
                match self.apply(ns, &r.metadata.name, r.spec.nonce) {
                    Ok(rec) => RestResponse::resource(201, rec.to_resource()),
                    Err(e) => failure(400, "BadRequest", e.to_string()),
                }
            }
            (Method::Patch, Some(name)) => {
                let patch: PatchBody = match serde_json::from_slice(body) {
                    Ok(p) => p,
                    Err(e) => return failure(400, "BadRequest", format!("invalid patch: {e}")),
                };
                if self.get(ns, name).is_none() {
                    return failure(404, "NotFound", format!("testresources \"{name}\" not found"));
                }
                match self.apply(ns, name, patch.spec.nonce) {
                    Ok(rec) => RestResponse::resource(200, rec.to_resource()),
                    Err(e) => failure(400, "BadRequest", e.to_string()),
                }
            }
            (Method::Delete, Some(name)) => match self.get(ns, name) {
                Some(rec) if self.delete(ns, name) => RestResponse::resource(200, rec.to_resource()),
                _ => failure(404, "NotFound", format!("testresources \"{name}\" not found")),
            },
            (m, _) => failure(405, "MethodNotAllowed", format!("{m} not supported on {path}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use wasm_operator_abi::resource::{collection_path, item_path};

    fn body(r: &RestResponse) -> serde_json::Value {
        serde_json::from_slice(&r.body).unwrap()
    }

    #[test]
    fn put_get_delete_cycle() {
        let s = ApiServer::new();
        let path = item_path("ns-1", "r");
        let put = s.handle(Method::Put, &path, &TestResource::new("ns-1", "r", 4).to_json());
        assert_eq!(put.status, 201);
        assert_eq!(body(&put)["metadata"]["resourceVersion"], "1");
        assert_eq!(s.handle(Method::Put, &path, &TestResource::new("", "", 5).to_json()).status, 200);

        let got = s.handle(Method::Get, &path, b"");
        assert_eq!(got.status, 200);
        assert_eq!(body(&got)["spec"]["nonce"], 5);

        assert_eq!(s.handle(Method::Delete, &path, b"").status, 200);
        let gone = s.handle(Method::Get, &path, b"");
        assert_eq!(gone.status, 404);
        assert_eq!(body(&gone)["kind"], "Status");
        assert_eq!(s.handle(Method::Delete, &path, b"").status, 404);
    }

    #[test]
    fn post_and_patch() {
        let s = ApiServer::new();
        let col = collection_path("ns");
        assert_eq!(s.handle(Method::Post, &col, &TestResource::new("ns", "a", 1).to_json()).status, 201);
        assert_eq!(s.handle(Method::Post, &col, &TestResource::new("ns", "a", 1).to_json()).status, 409);
        let patched = s.handle(Method::Patch, &item_path("ns", "a"), br#"{"spec":{"nonce":8}}"#);
        assert_eq!(patched.status, 200);
        assert_eq!(s.get("ns", "a").unwrap().spec_nonce, 8);
        assert_eq!(s.handle(Method::Patch, &item_path("ns", "b"), br#"{"spec":{"nonce":8}}"#).status, 404);

        let list = s.handle(Method::Get, &col, b"");
        assert_eq!(body(&list)["items"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn malformed_requests() {
        let s = ApiServer::new();
        assert_eq!(s.handle(Method::Get, "/not/a/resource", b"").status, 400);
        assert_eq!(s.handle(Method::Put, &item_path("ns", "r"), b"{nope").status, 400);
        assert_eq!(
            s.handle(Method::Put, &item_path("ns", "r"), &TestResource::new("ns", "other", 1).to_json()).status,
            400
        );
        assert_eq!(s.handle(Method::Delete, &collection_path("ns"), b"").status, 405);
    }
}
