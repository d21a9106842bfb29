//! Canonical JSON wire encoding for requests and responses.
//!
//! Decoding happens in two passes: the bytes are parsed into a JSON tree
//! (failures are [`CodecError::Parse`]) and the tree is mapped onto the
//! typed model (failures are [`CodecError::Schema`]). In strict mode a
//! field is unknown if it does not survive a decode/encode round trip, which
//! catches unknown fields at any depth without a hand-maintained schema.

use kaas_core::protocol::{KaasRequest, KaasResponse};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Strictness {
    /// Unknown fields are a schema error.
    Strict,
    /// Unknown fields are ignored.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error: {0}")]
    Schema(String),
}

fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("protocol types always serialize")
}

fn decode<T: Serialize + DeserializeOwned>(bytes: &[u8], mode: Strictness) -> Result<T, CodecError> {
    let tree: Value = serde_json::from_slice(bytes).map_err(|e| CodecError::Parse(e.to_string()))?;
    let value = T::deserialize(&tree).map_err(|e| CodecError::Schema(e.to_string()))?;
    if mode == Strictness::Strict {
        let canonical = serde_json::to_value(&value).expect("protocol types always serialize");
        if let Some(path) = first_unknown_field(&tree, &canonical, String::new()) {
            return Err(CodecError::Schema(format!("unknown field {path}")));
        }
    }
    Ok(value)
}

fn first_unknown_field(input: &Value, canonical: &Value, path: String) -> Option<String> {
    match (input, canonical) {
        (Value::Object(a), Value::Object(b)) => a.iter().find_map(|(k, v)| match b.get(k) {
            None => Some(format!("{path}.{k}")),
            Some(w) => first_unknown_field(v, w, format!("{path}.{k}")),
        }),
        (Value::Array(a), Value::Array(b)) => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (v, w))| first_unknown_field(v, w, format!("{path}[{i}]"))),
        _ => None,
    }
}

pub fn encode_request(req: &KaasRequest) -> Vec<u8> {
    encode(req)
}

pub fn decode_request(bytes: &[u8], mode: Strictness) -> Result<KaasRequest, CodecError> {
    decode(bytes, mode)
}

pub fn encode_response(resp: &KaasResponse) -> Vec<u8> {
    encode(resp)
}

pub fn decode_response(bytes: &[u8], mode: Strictness) -> Result<KaasResponse, CodecError> {
    decode(bytes, mode)
}
