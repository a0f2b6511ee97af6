//! Canonical JSON: UTF-8, object keys sorted, no insignificant whitespace.
//!
//! `serde_json::Value` keeps objects in a `BTreeMap`, so going through a `Value`
//! sorts every nested key.

use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn to_vec<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let v = serde_json::to_value(value)?;
    serde_json::to_vec(&v)
}

pub fn to_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub fn from_slice<T: DeserializeOwned>(bytes: &[u8]) -> serde_json::Result<T> {
    serde_json::from_slice(bytes)
}
