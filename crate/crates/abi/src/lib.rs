//! Contract between the controller host runtime and its WebAssembly guests.
//!
//! Everything that crosses the boundary is an [`Envelope`]: requests the guest
//! submits through `kube_request`, and the responses, watch events and stream
//! closures the host delivers back through `wakeup`. The [`resource`] module
//! holds the JSON shapes both sides agree on for the `TestResource` kind.

mod envelope;
mod id;
pub mod names;
pub mod resource;

pub use envelope::{
    DecodingError, EncodingError, Envelope, InvariantViolation, Kind, Limits, Method, DEFAULT_MAX_BODY,
    DEFAULT_MAX_PATH, ENVELOPE_VERSION, HEADER_LEN,
};
pub use id::{AsyncId, AsyncIdAllocator};
