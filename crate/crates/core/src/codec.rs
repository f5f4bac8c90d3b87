//! Canonical binary serialization.
//!
//! Every digest and signature in the system is computed over this encoding, so
//! it must be byte-for-byte deterministic: fields in declaration order,
//! integers big-endian at fixed width, sequence lengths as big-endian `u64`,
//! enum variants as big-endian `u32` tags. Maps are always `BTreeMap` so that
//! iteration order is fixed.

use bincode::Options;
use serde::{de::DeserializeOwned, Serialize};

#[derive(Debug, thiserror::Error)]
#[error("canonical decoding failed: {0}")]
pub struct CodecError(#[from] bincode::Error);

fn options() -> impl Options {
    bincode::DefaultOptions::new()
        .with_big_endian()
        .with_fixint_encoding()
        .reject_trailing_bytes()
}

/// Encode a value canonically.
pub fn encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    options()
        .serialize(value)
        .expect("canonical encoding of in-memory values cannot fail")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, CodecError> {
    Ok(options().deserialize(bytes)?)
}
