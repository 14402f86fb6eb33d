//! JSON wire shapes and REST paths for the `TestResource` kind.
//!
//! The server, the host bridge and guests all (de)serialize through these
//! types so the three never drift apart.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GROUP: &str = "test.dev";
pub const VERSION: &str = "v1";
pub const API_VERSION: &str = "test.dev/v1";
pub const KIND: &str = "TestResource";
pub const PLURAL: &str = "testresources";
pub const API_PREFIX: &str = "/apis/test.dev/v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TestResource {
    pub api_version: String,
    pub kind: String,
    pub metadata: ObjectMeta,
    pub spec: TestResourceSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectMeta {
    pub namespace: String,
    pub name: String,
    /// Decimal string, as Kubernetes does. Empty on objects not yet stored.
    #[serde(default)]
    pub resource_version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TestResourceSpec {
    pub nonce: u64,
}

impl TestResource {
    pub fn new(namespace: &str, name: &str, nonce: u64) -> Self {
        TestResource {
            api_version: API_VERSION.to_owned(),
            kind: KIND.to_owned(),
            metadata: ObjectMeta {
                namespace: namespace.to_owned(),
                name: name.to_owned(),
                resource_version: String::new(),
            },
            spec: TestResourceSpec { nonce },
        }
    }

    pub fn with_resource_version(mut self, rv: u64) -> Self {
        self.metadata.resource_version = rv.to_string();
        self
    }

    /// Parsed `metadata.resourceVersion`, if present and numeric.
    pub fn resource_version(&self) -> Option<u64> {
        self.metadata.resource_version.parse().ok()
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("TestResource serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EventType {
    Added,
    Modified,
    Deleted,
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventType::Added => "ADDED",
            EventType::Modified => "MODIFIED",
            EventType::Deleted => "DELETED",
        })
    }
}

/// One watch event: `{"type":"MODIFIED","object":{...}}`. Over HTTP these are
/// newline-delimited; across the guest boundary one event fills one envelope body.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchEvent {
    #[serde(rename = "type")]
    pub event_type: EventType,
    pub object: TestResource,
}

impl WatchEvent {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("WatchEvent serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }
}

/// Names and namespaces follow `[a-z0-9-]{1,63}`.
pub fn is_valid_name(name: &str) -> bool {
    (1..=63).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

pub fn collection_path(namespace: &str) -> String {
    format!("{API_PREFIX}/namespaces/{namespace}/{PLURAL}")
}

pub fn item_path(namespace: &str, name: &str) -> String {
    format!("{API_PREFIX}/namespaces/{namespace}/{PLURAL}/{name}")
}

/// Path used with method WATCH across the guest boundary.
pub fn watch_path(namespace: &str, from_version: u64) -> String {
    format!("{}?resourceVersion={from_version}", collection_path(namespace))
}

/// A parsed TestResource request path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResourcePath {
    pub namespace: String,
    pub name: Option<String>,
    pub resource_version: Option<u64>,
    /// `watch=true` query flag (HTTP form of a watch).
    pub watch: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PathError {
    #[error("path {0:?} is not under {API_PREFIX}/namespaces/{{ns}}/{PLURAL}")]
    NotAResourcePath(String),
    #[error("invalid namespace {0:?}")]
    InvalidNamespace(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("invalid query parameter {0:?}")]
    InvalidQuery(String),
}

/// Parses `/apis/test.dev/v1/namespaces/{ns}/testresources[/{name}][?query]`.
pub fn parse_path(path: &str) -> Result<ResourcePath, PathError> {
    let (path_part, query) = match path.split_once('?') {
        Some((p, q)) => (p, Some(q)),
        None => (path, None),
    };
    let rest = path_part
        .strip_prefix(API_PREFIX)
        .and_then(|r| r.strip_prefix("/namespaces/"))
        .ok_or_else(|| PathError::NotAResourcePath(path.to_owned()))?;
    let mut segments = rest.split('/');
    let namespace = segments.next().unwrap_or_default();
    if !is_valid_name(namespace) {
        return Err(PathError::InvalidNamespace(namespace.to_owned()));
    }
    if segments.next() != Some(PLURAL) {
        return Err(PathError::NotAResourcePath(path.to_owned()));
    }
    let name = match segments.next() {
        None => None,
        Some(n) if is_valid_name(n) => Some(n.to_owned()),
        Some(n) => return Err(PathError::InvalidName(n.to_owned())),
    };
    if segments.next().is_some() {
        return Err(PathError::NotAResourcePath(path.to_owned()));
    }

    let mut parsed = ResourcePath {
        namespace: namespace.to_owned(),
        name,
        resource_version: None,
        watch: false,
    };
    for pair in query.into_iter().flat_map(|q| q.split('&')).filter(|p| !p.is_empty()) {
        let (key, value) = pair.split_once('=').unwrap_or((pair, ""));
        match key {
            "resourceVersion" => {
                parsed.resource_version =
                    Some(value.parse().map_err(|_| PathError::InvalidQuery(pair.to_owned()))?);
            }
            "watch" => {
                parsed.watch = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(PathError::InvalidQuery(pair.to_owned())),
                }
            }
            // Unknown parameters are ignored like the real API server does.
            _ => {}
        }
    }
    Ok(parsed)
}
