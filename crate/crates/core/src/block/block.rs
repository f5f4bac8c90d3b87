use serde::{Deserialize, Serialize};

use crate::codec;
use crate::crypto::Digest;
use crate::workflow::Transaction;

/// A numbered, hash-chained container of transactions.
///
/// `hash` covers `(number, previous_hash, transactions)`. The timestamp is
/// informational and sits outside the preimage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub number: u64,
    pub previous_hash: Digest,
    pub transactions: Vec<Transaction>,
    pub timestamp_ms: u64,
    pub hash: Digest,
}

/// Bytes at the tail of the canonical block encoding that are not hashed:
/// the timestamp (8) and the hash itself (32).
pub const UNHASHED_SUFFIX: usize = 8 + 32;

impl Block {
    pub fn build(number: u64, previous_hash: Digest, transactions: Vec<Transaction>, timestamp_ms: u64) -> Self {
        let hash = Self::hash_of(number, &previous_hash, &transactions);
        Block { number, previous_hash, transactions, timestamp_ms, hash }
    }

    pub fn genesis() -> Self {
        Self::build(0, Digest::ZERO, Vec::new(), 0)
    }

    pub fn hash_of(number: u64, previous_hash: &Digest, transactions: &[Transaction]) -> Digest {
        Digest::of(&(number, previous_hash, transactions))
    }

    pub fn compute_hash(&self) -> Digest {
        Self::hash_of(self.number, &self.previous_hash, &self.transactions)
    }

    /// Whether the stored hash matches the contents.
    pub fn is_sealed(&self) -> bool {
        self.compute_hash() == self.hash
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, codec::CodecError> {
        codec::decode(bytes)
    }
}
