//! Length-prefixed binary envelope exchanged across the guest/host boundary.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       1     version (always 1)
//! 1       1     kind    (1=Request, 2=Response, 3=WatchEvent, 4=StreamClosed)
//! 2       1     method  (0=None, 1=GET, 2=POST, 3=PUT, 4=DELETE, 5=PATCH, 6=WATCH)
//! 3       2     status  (HTTP-style code, 0 for requests)
//! 5       4     path_len
//! 9       n     path    (UTF-8)
//! 9+n     4     body_len
//! 13+n    m     body    (opaque)
//! ```

use std::fmt;

use thiserror::Error;

/// The only envelope version this crate reads or writes.
pub const ENVELOPE_VERSION: u8 = 1;

/// Size of the fixed part of an envelope (everything except path and body bytes).
pub const HEADER_LEN: usize = 13;

/// Default cap on path length.
pub const DEFAULT_MAX_PATH: usize = 1 << 20;

/// Default cap on body length.
pub const DEFAULT_MAX_BODY: usize = 16 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Request = 1,
    Response = 2,
    WatchEvent = 3,
    StreamClosed = 4,
}

impl Kind {
    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            1 => Some(Kind::Request),
            2 => Some(Kind::Response),
            3 => Some(Kind::WatchEvent),
            4 => Some(Kind::StreamClosed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Method {
    None = 0,
    Get = 1,
    Post = 2,
    Put = 3,
    Delete = 4,
    Patch = 5,
    Watch = 6,
}

impl Method {
    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 => Some(Method::None),
            1 => Some(Method::Get),
            2 => Some(Method::Post),
            3 => Some(Method::Put),
            4 => Some(Method::Delete),
            5 => Some(Method::Patch),
            6 => Some(Method::Watch),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::None => "NONE",
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
            Method::Patch => "PATCH",
            Method::Watch => "WATCH",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A decoded envelope. The version byte is implicit: every value of this type
/// encodes with [`ENVELOPE_VERSION`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub kind: Kind,
    pub method: Method,
    pub status: u16,
    pub path: String,
    pub body: Vec<u8>,
}

impl Envelope {
    pub fn request(method: Method, path: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        Envelope {
            kind: Kind::Request,
            method,
            status: 0,
            path: path.into(),
            body: body.into(),
        }
    }

    pub fn response(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Envelope {
            kind: Kind::Response,
            method: Method::None,
            status,
            path: String::new(),
            body: body.into(),
        }
    }

    pub fn watch_event(body: impl Into<Vec<u8>>) -> Self {
        Envelope {
            kind: Kind::WatchEvent,
            method: Method::None,
            status: 200,
            path: String::new(),
            body: body.into(),
        }
    }

    /// Terminal message of a watch stream; `reason` is carried in the body.
    pub fn stream_closed(status: u16, reason: impl Into<Vec<u8>>) -> Self {
        Envelope {
            kind: Kind::StreamClosed,
            method: Method::None,
            status,
            path: String::new(),
            body: reason.into(),
        }
    }

    /// Number of bytes [`encode`](Envelope::encode) produces.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.path.len() + self.body.len()
    }

    /// Checks the kind/method/status invariants.
    pub fn check(&self) -> Result<(), InvariantViolation> {
        match self.kind {
            Kind::Request if self.status != 0 => Err(InvariantViolation::StatusOnRequest(self.status)),
            Kind::Request if self.method == Method::None => Err(InvariantViolation::RequestWithoutMethod),
            Kind::Response | Kind::WatchEvent | Kind::StreamClosed if self.method != Method::None => {
                Err(InvariantViolation::MethodOnNonRequest(self.method))
            }
            _ => Ok(()),
        }
    }

    pub fn is_error(&self) -> bool {
        self.kind == Kind::Response && self.status >= 400
    }

    pub fn encode(&self) -> Result<Vec<u8>, EncodingError> {
        self.encode_with(&Limits::default())
    }

    pub fn encode_with(&self, limits: &Limits) -> Result<Vec<u8>, EncodingError> {
        self.check()?;
        if self.path.len() > limits.max_path {
            return Err(EncodingError::PathTooLong { len: self.path.len(), max: limits.max_path });
        }
        if self.body.len() > limits.max_body {
            return Err(EncodingError::BodyTooLong { len: self.body.len(), max: limits.max_body });
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(ENVELOPE_VERSION);
        out.push(self.kind as u8);
        out.push(self.method as u8);
        out.extend_from_slice(&self.status.to_le_bytes());
        out.extend_from_slice(&(self.path.len() as u32).to_le_bytes());
        out.extend_from_slice(self.path.as_bytes());
        out.extend_from_slice(&(self.body.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.body);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DecodingError> {
        Self::decode_with(bytes, &Limits::default())
    }

    pub fn decode_with(bytes: &[u8], limits: &Limits) -> Result<Self, DecodingError> {
        if bytes.len() < HEADER_LEN {
            return Err(DecodingError::TooShort { len: bytes.len() });
        }
        if bytes[0] != ENVELOPE_VERSION {
            return Err(DecodingError::UnsupportedVersion(bytes[0]));
        }
        let kind = Kind::from_u8(bytes[1]).ok_or(DecodingError::UnknownKind(bytes[1]))?;
        let method = Method::from_u8(bytes[2]).ok_or(DecodingError::UnknownMethod(bytes[2]))?;
        let status = u16::from_le_bytes([bytes[3], bytes[4]]);
        let path_len = read_u32(bytes, 5) as usize;
        if path_len > limits.max_path {
            return Err(DecodingError::PathTooLong { len: path_len, max: limits.max_path });
        }
        // path_len bytes of path plus the 4-byte body_len must fit.
        let body_len_at = 9usize
            .checked_add(path_len)
            .filter(|end| end + 4 <= bytes.len())
            .ok_or(DecodingError::LengthMismatch {
                expected: HEADER_LEN.saturating_add(path_len),
                actual: bytes.len(),
            })?;
        let body_len = read_u32(bytes, body_len_at) as usize;
        if body_len > limits.max_body {
            return Err(DecodingError::BodyTooLong { len: body_len, max: limits.max_body });
        }
        let expected = HEADER_LEN + path_len + body_len;
        if bytes.len() != expected {
            return Err(DecodingError::LengthMismatch { expected, actual: bytes.len() });
        }
        let path = std::str::from_utf8(&bytes[9..body_len_at])
            .map_err(|_| DecodingError::InvalidUtf8)?
            .to_owned();
        let envelope = Envelope {
            kind,
            method,
            status,
            path,
            body: bytes[body_len_at + 4..].to_vec(),
        };
        envelope.check()?;
        Ok(envelope)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Size caps applied when encoding and decoding. Oversize is an error, never truncation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Limits {
    pub max_path: usize,
    pub max_body: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_path: DEFAULT_MAX_PATH, max_body: DEFAULT_MAX_BODY }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvariantViolation {
    #[error("request envelope carries status {0}, expected 0")]
    StatusOnRequest(u16),
    #[error("request envelope has method None")]
    RequestWithoutMethod,
    #[error("non-request envelope carries method {0}")]
    MethodOnNonRequest(Method),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodingError {
    #[error("path is {len} bytes, limit is {max}")]
    PathTooLong { len: usize, max: usize },
    #[error("body is {len} bytes, limit is {max}")]
    BodyTooLong { len: usize, max: usize },
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodingError {
    #[error("envelope too short: {len} bytes, header needs {HEADER_LEN}")]
    TooShort { len: usize },
    #[error("unsupported envelope version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown envelope kind {0}")]
    UnknownKind(u8),
    #[error("unknown method {0}")]
    UnknownMethod(u8),
    #[error("length mismatch: header implies {expected} bytes, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("path is {len} bytes, limit is {max}")]
    PathTooLong { len: usize, max: usize },
    #[error("body is {len} bytes, limit is {max}")]
    BodyTooLong { len: usize, max: usize },
    #[error("path is not valid UTF-8")]
    InvalidUtf8,
    #[error(transparent)]
    Invariant(#[from] InvariantViolation),
}
