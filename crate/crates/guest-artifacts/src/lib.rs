//! The workspace guest modules, compiled for wasm32 at build time.

/// The chain benchmark controller. Config: `{"source","dest","ballast_bytes"}`.
pub static SYNTHETIC_OPERATOR: &[u8] = include_bytes!(concat!(env!("OUT_DIR"), "/synthetic_operator.wasm"));

/// Test programs selected by `{"program": ...}`; see the `reference-guests` crate.
pub static REFERENCE_GUESTS: &[u8] = include_bytes!(concat!(env!("OUT_DIR"), "/reference_guests.wasm"));
