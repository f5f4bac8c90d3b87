//! Signed, length-prefixed message envelopes.
//!
//! Wire layout of one frame:
//!
//! ```text
//! +-----------+------+-----------+-----------------+---------------+
//! | len: u32  | kind | sender    | body            | signature     |
//! | big-endian| u8   | u32 BE    | len - 69 bytes  | 64 bytes      |
//! +-----------+------+-----------+-----------------+---------------+
//! ```
//!
//! `len` counts every byte after itself. The signature is Ed25519 over
//! `kind || sender || body`.

use serde::{Deserialize, Serialize};

use crate::crypto::{KeyDirectory, KeyPair, NodeId, Signature};

/// One-byte message kind tag. Consensus and block exchange share the
/// transport but use disjoint tag ranges.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    Request = 0x01,
    PrePrepare = 0x02,
    Prepare = 0x03,
    Commit = 0x04,
    Reply = 0x05,
    ViewChange = 0x06,
    NewView = 0x07,
    Checkpoint = 0x08,
    StateRequest = 0x09,
    StateReply = 0x0a,
    Join = 0x0b,
    Hello = 0x0c,
    BlockRequest = 0x20,
    BlockSend = 0x21,
    BlockchainRequest = 0x22,
    BlockchainSend = 0x23,
}

/// Logical channel a kind belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Consensus,
    Block,
    Control,
}

impl MessageKind {
    pub const ALL: [MessageKind; 16] = [
        MessageKind::Request,
        MessageKind::PrePrepare,
        MessageKind::Prepare,
        MessageKind::Commit,
        MessageKind::Reply,
        MessageKind::ViewChange,
        MessageKind::NewView,
        MessageKind::Checkpoint,
        MessageKind::StateRequest,
        MessageKind::StateReply,
        MessageKind::Join,
        MessageKind::Hello,
        MessageKind::BlockRequest,
        MessageKind::BlockSend,
        MessageKind::BlockchainRequest,
        MessageKind::BlockchainSend,
    ];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| *k as u8 == b)
    }

    pub fn channel(self) -> Channel {
        match self as u8 {
            0x20..=0x2f => Channel::Block,
            0x0c => Channel::Control,
            _ => Channel::Consensus,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("frame length {0} below minimum")]
    TooShort(u32),
    #[error("frame length {0} exceeds limit")]
    TooLong(u32),
    #[error("unknown message kind 0x{0:02x}")]
    UnknownKind(u8),
}

/// Largest accepted frame body (16 MiB).
pub const MAX_FRAME: u32 = 16 * 1024 * 1024;
const HEADER: usize = 1 + 4;
const SIG: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedEnvelope {
    pub sender: NodeId,
    pub kind: MessageKind,
    pub body: Vec<u8>,
    pub signature: Signature,
}

fn signed_bytes(kind: MessageKind, sender: NodeId, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + body.len());
    out.push(kind as u8);
    out.extend_from_slice(&sender.0.to_be_bytes());
    out.extend_from_slice(body);
    out
}

impl SignedEnvelope {
    pub fn sign(keys: &KeyPair, sender: NodeId, kind: MessageKind, body: Vec<u8>) -> Self {
        let signature = keys.sign(&signed_bytes(kind, sender, &body));
        SignedEnvelope { sender, kind, body, signature }
    }

    pub fn verify(&self, directory: &KeyDirectory) -> bool {
        directory.verify(
            self.sender,
            &signed_bytes(self.kind, self.sender, &self.body),
            &self.signature,
        )
    }

    /// Serialize into a wire frame.
    pub fn to_frame(&self) -> Vec<u8> {
        let len = (HEADER + self.body.len() + SIG) as u32;
        let mut out = Vec::with_capacity(4 + len as usize);
        out.extend_from_slice(&len.to_be_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.sender.0.to_be_bytes());
        out.extend_from_slice(&self.body);
        out.extend_from_slice(&self.signature.0);
        out
    }

    /// Parse one frame from the front of `buf`. Returns the envelope and the
    /// number of bytes consumed, or `Ok(None)` if more bytes are needed.
    pub fn from_frame(buf: &[u8]) -> Result<Option<(Self, usize)>, FrameError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[..4].try_into().unwrap());
        if (len as usize) < HEADER + SIG {
            return Err(FrameError::TooShort(len));
        }
        if len > MAX_FRAME {
            return Err(FrameError::TooLong(len));
        }
        let total = 4 + len as usize;
        if buf.len() < total {
            return Ok(None);
        }
        let frame = &buf[4..total];
        let kind = MessageKind::from_byte(frame[0]).ok_or(FrameError::UnknownKind(frame[0]))?;
        let sender = NodeId(u32::from_be_bytes(frame[1..5].try_into().unwrap()));
        let body = frame[5..frame.len() - SIG].to_vec();
        let mut sig = [0u8; 64];
        sig.copy_from_slice(&frame[frame.len() - SIG..]);
        Ok(Some((SignedEnvelope { sender, kind, body, signature: Signature(sig) }, total)))
    }

    /// Parse exactly one complete frame.
    pub fn from_exact_frame(buf: &[u8]) -> Result<Self, FrameError> {
        match Self::from_frame(buf)? {
            Some((env, used)) if used == buf.len() => Ok(env),
            Some((_, used)) => Err(FrameError::Truncated { need: used, have: buf.len() }),
            None => Err(FrameError::Truncated { need: buf.len() + 1, have: buf.len() }),
        }
    }
}
