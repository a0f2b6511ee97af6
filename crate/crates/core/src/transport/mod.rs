//! Activation transport: compressed self-describing envelopes, routed inline
//! or through a content-addressed filesystem store depending on their size.

mod envelope;
mod store;
mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use envelope::{compression_ratio, decode_payload, encode_payload, Codec, PayloadEnvelope};
pub use store::{sha256_hex, PayloadStore};
pub use tensor::{element_count, DType, Tensor};

/// Default inline threshold, 1 MiB.
pub const DEFAULT_TAU_WS: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("base64: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("decompression failed: {0}")]
    Decompress(String),
    #[error("decompression failed: unsupported codec `{0}`")]
    UnsupportedCodec(String),
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("payload length {actual} does not match dtype/shape ({expected} bytes)")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("store key {0} not found")]
    MissingKey(String),
    #[error("store entry {key} hashes to {actual}")]
    HashMismatch { key: String, actual: String },
    #[error("store write failed: {0}")]
    StoreWrite(String),
    #[error("store read failed: {0}")]
    StoreRead(String),
}

/// How an activation travels: inline in the message or by store reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadRouting {
    Inline(PayloadEnvelope),
    StoreRef(String),
}

impl PayloadRouting {
    pub fn is_inline(&self) -> bool {
        matches!(self, PayloadRouting::Inline(_))
    }
}

/// Inline when the canonical envelope is at most `tau_ws` bytes, otherwise stored.
pub fn route_payload(
    e: PayloadEnvelope,
    tau_ws: u64,
    store: &PayloadStore,
) -> Result<PayloadRouting, TransportError> {
    let bytes = e.canonical_bytes();
    if bytes.len() as u64 <= tau_ws {
        Ok(PayloadRouting::Inline(e))
    } else {
        store.put(&bytes).map(PayloadRouting::StoreRef)
    }
}

pub fn resolve_payload(
    r: &PayloadRouting,
    store: &PayloadStore,
) -> Result<PayloadEnvelope, TransportError> {
    match r {
        PayloadRouting::Inline(e) => Ok(e.clone()),
        PayloadRouting::StoreRef(key) => PayloadEnvelope::from_canonical(&store.get(key)?),
    }
}

/// Shape carried by a routed payload, reading the store when needed.
pub fn routed_shape(
    r: &PayloadRouting,
    store: &PayloadStore,
) -> Result<Vec<usize>, TransportError> {
    Ok(resolve_payload(r, store)?.shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn envelope_of_len(target: usize) -> PayloadEnvelope {
        // Grow the data field until the canonical form hits `target` exactly.
        let mut e = PayloadEnvelope {
            compression: "none".into(),
            data: String::new(),
            dtype: "float32".into(),
            shape: vec![1],
        };
        let base = e.canonical_bytes().len();
        e.data = "A".repeat(target - base);
        assert_eq!(e.canonical_bytes().len(), target);
        e
    }

    #[test]
    fn small_activation_goes_inline() {
        let dir = tempfile::tempdir().unwrap();
        let store = PayloadStore::open(dir.path()).unwrap();
        let e = envelope_of_len(1168);
        assert!(route_payload(e, DEFAULT_TAU_WS, &store)
            .unwrap()
            .is_inline());
        assert!(store.is_empty());
    }

    #[test]
    fn large_activation_goes_to_store() {
        let dir = tempfile::tempdir().unwrap();
        let store = PayloadStore::open(dir.path()).unwrap();
        let e = envelope_of_len(2 << 20);
        let r = route_payload(e.clone(), DEFAULT_TAU_WS, &store).unwrap();
        let PayloadRouting::StoreRef(key) = &r else {
            panic!("expected store ref")
        };
        assert_eq!(key, &sha256_hex(&e.canonical_bytes()));
        assert_eq!(resolve_payload(&r, &store).unwrap(), e);
    }

    #[test]
    fn boundary_is_inclusive() {
        let dir = tempfile::tempdir().unwrap();
        let store = PayloadStore::open(dir.path()).unwrap();
        let e = envelope_of_len(4096);
        assert!(route_payload(e.clone(), 4096, &store).unwrap().is_inline());
        assert!(!route_payload(e, 4095, &store).unwrap().is_inline());
    }

    #[test]
    fn missing_and_tampered_entries() {
        let dir = tempfile::tempdir().unwrap();
        let store = PayloadStore::open(dir.path()).unwrap();
        let e = envelope_of_len(300);
        let r = route_payload(e, 1, &store).unwrap();
        let PayloadRouting::StoreRef(key) = r.clone() else {
            panic!()
        };

        let path = store.path_for(&key);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[10] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            resolve_payload(&r, &store),
            Err(TransportError::HashMismatch { .. })
        ));

        std::fs::remove_file(&path).unwrap();
        assert_eq!(
            resolve_payload(&r, &store),
            Err(TransportError::MissingKey(key))
        );
    }

    #[test]
    fn routing_same_envelope_twice_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let store = PayloadStore::open(dir.path()).unwrap();
        let e = envelope_of_len(500);
        let a = route_payload(e.clone(), 1, &store).unwrap();
        let b = route_payload(e, 1, &store).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn routing_wire_form() {
        let r = PayloadRouting::StoreRef("ab".into());
        assert_eq!(
            crate::canonical::to_string(&r).unwrap(),
            r#"{"store_ref":"ab"}"#
        );
    }
}
