use proptest::prelude::*;
use wasm_operator_abi::{DecodingError, Envelope, Kind, Method, HEADER_LEN};

fn method() -> impl Strategy<Value = Method> {
    prop_oneof![
        Just(Method::Get),
        Just(Method::Post),
        Just(Method::Put),
        Just(Method::Delete),
        Just(Method::Patch),
        Just(Method::Watch),
    ]
}

fn envelope() -> impl Strategy<Value = Envelope> {
    let path = "\\PC{0,64}";
    let body = proptest::collection::vec(any::<u8>(), 0..256);
    prop_oneof![
        (method(), path, body.clone()).prop_map(|(m, p, b)| Envelope::request(m, p, b)),
        (any::<u16>(), body.clone()).prop_map(|(s, b)| Envelope::response(s, b)),
        body.clone().prop_map(Envelope::watch_event),
        (any::<u16>(), body).prop_map(|(s, b)| Envelope::stream_closed(s, b)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip(e in envelope()) {
        let bytes = e.encode().unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + e.path.len() + e.body.len());
        prop_assert_eq!(Envelope::decode(&bytes).unwrap(), e);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    /// Mutating a fixed header byte either yields an envelope that re-encodes to
    /// the mutated bytes (the mutation was itself valid) or is rejected.
    #[test]
    fn header_mutation_never_misparses(e in envelope(), pos in 0usize..5, value in any::<u8>()) {
        let mut bytes = e.encode().unwrap();
        bytes[pos] = value;
        match Envelope::decode(&bytes) {
            Ok(decoded) => prop_assert_eq!(decoded.encode().unwrap(), bytes),
            Err(_) => {}
        }
    }

    #[test]
    fn length_field_mutation_is_rejected(e in envelope(), delta in 1u32..1000, body_field in any::<bool>()) {
        let mut bytes = e.encode().unwrap();
        let at = if body_field { 9 + e.path.len() } else { 5 };
        let old = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let new = old.wrapping_add(delta);
        bytes[at..at + 4].copy_from_slice(&new.to_le_bytes());
        prop_assert!(Envelope::decode(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected(e in envelope(), cut in any::<prop::sample::Index>()) {
        let bytes = e.encode().unwrap();
        let cut = cut.index(bytes.len());
        let err = Envelope::decode(&bytes[..cut]).unwrap_err();
        if cut < HEADER_LEN {
            prop_assert_eq!(err, DecodingError::TooShort { len: cut });
        } else {
            prop_assert!(matches!(err, DecodingError::LengthMismatch { .. }), "{:?}", err);
        }
    }
}

#[test]
fn every_kind_and_method_byte_is_checked() {
    let base = Envelope::response(200, b"x".to_vec()).encode().unwrap();
    for k in 0..=255u8 {
        let mut b = base.clone();
        b[1] = k;
        let decoded = Envelope::decode(&b);
        match Kind::from_u8(k) {
            // A response header relabelled as a request has a non-zero status.
            Some(Kind::Request) => assert!(decoded.is_err()),
            Some(kind) => assert_eq!(decoded.unwrap().kind, kind),
            None => assert_eq!(decoded, Err(DecodingError::UnknownKind(k))),
        }
    }
}
