//! Ordering protocol payloads. Each travels as the body of a
//! [`SignedEnvelope`] whose kind names the payload type; the envelope's
//! signature is the message signature, so stored envelopes double as
//! certificates.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::types::{ClientRequest, ExecutionResult, Seq, View, NULL_DIGEST};
use crate::codec;
use crate::crypto::{Digest, KeyDirectory, NodeId};
use crate::transport::{MessageKind, SignedEnvelope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrePrepare {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest,
    /// The client's signed request; absent for gap fillers.
    pub request: Option<SignedEnvelope>,
}

/// PREPARE and COMMIT share this shape; the voter is the envelope sender.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub view: View,
    pub seq: Seq,
    pub digest: Digest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reply {
    pub view: View,
    pub timestamp_ms: u64,
    pub client: NodeId,
    pub result: ExecutionResult,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMsg {
    pub seq: Seq,
    pub state_digest: Digest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedCert {
    pub pre_prepare: SignedEnvelope,
    pub prepares: Vec<SignedEnvelope>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewChange {
    pub new_view: View,
    pub stable_seq: Seq,
    pub stable_digest: Digest,
    /// CHECKPOINT envelopes proving `stable_seq` (empty at genesis).
    pub checkpoint_proof: Vec<SignedEnvelope>,
    pub prepared: Vec<PreparedCert>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewView {
    pub view: View,
    pub view_changes: Vec<SignedEnvelope>,
    pub pre_prepares: Vec<SignedEnvelope>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRequest {
    pub have: Seq,
}

/// A committed log entry with the evidence that it committed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommittedEntry {
    pub seq: Seq,
    pub view: View,
    pub digest: Digest,
    pub request: Option<SignedEnvelope>,
    pub commits: Vec<SignedEnvelope>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateReply {
    pub seq: Seq,
    /// Canonical encoding of the replicated state at `seq`.
    pub snapshot: Vec<u8>,
    pub proof: Vec<SignedEnvelope>,
    pub log: Vec<CommittedEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProtocolMessage {
    Request(ClientRequest),
    PrePrepare(PrePrepare),
    Prepare(Vote),
    Commit(Vote),
    Reply(Reply),
    ViewChange(ViewChange),
    NewView(NewView),
    Checkpoint(CheckpointMsg),
    StateRequest(StateRequest),
    StateReply(StateReply),
    /// A node announcing it wants to (re)join; answered like a state request.
    Join(StateRequest),
}

fn dec<T: DeserializeOwned>(body: &[u8]) -> Option<T> {
    codec::decode(body).ok()
}

impl ProtocolMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            ProtocolMessage::Request(_) => MessageKind::Request,
            ProtocolMessage::PrePrepare(_) => MessageKind::PrePrepare,
            ProtocolMessage::Prepare(_) => MessageKind::Prepare,
            ProtocolMessage::Commit(_) => MessageKind::Commit,
            ProtocolMessage::Reply(_) => MessageKind::Reply,
            ProtocolMessage::ViewChange(_) => MessageKind::ViewChange,
            ProtocolMessage::NewView(_) => MessageKind::NewView,
            ProtocolMessage::Checkpoint(_) => MessageKind::Checkpoint,
            ProtocolMessage::StateRequest(_) => MessageKind::StateRequest,
            ProtocolMessage::StateReply(_) => MessageKind::StateReply,
            ProtocolMessage::Join(_) => MessageKind::Join,
        }
    }

    pub fn encode_body(&self) -> Vec<u8> {
        match self {
            ProtocolMessage::Request(m) => codec::encode(m),
            ProtocolMessage::PrePrepare(m) => codec::encode(m),
            ProtocolMessage::Prepare(m) | ProtocolMessage::Commit(m) => codec::encode(m),
            ProtocolMessage::Reply(m) => codec::encode(m),
            ProtocolMessage::ViewChange(m) => codec::encode(m),
            ProtocolMessage::NewView(m) => codec::encode(m),
            ProtocolMessage::Checkpoint(m) => codec::encode(m),
            ProtocolMessage::StateRequest(m) | ProtocolMessage::Join(m) => codec::encode(m),
            ProtocolMessage::StateReply(m) => codec::encode(m),
        }
    }

    /// Decode the payload of an envelope. `None` for non-ordering kinds or
    /// malformed bodies.
    pub fn decode(kind: MessageKind, body: &[u8]) -> Option<Self> {
        Some(match kind {
            MessageKind::Request => ProtocolMessage::Request(dec(body)?),
            MessageKind::PrePrepare => ProtocolMessage::PrePrepare(dec(body)?),
            MessageKind::Prepare => ProtocolMessage::Prepare(dec(body)?),
            MessageKind::Commit => ProtocolMessage::Commit(dec(body)?),
            MessageKind::Reply => ProtocolMessage::Reply(dec(body)?),
            MessageKind::ViewChange => ProtocolMessage::ViewChange(dec(body)?),
            MessageKind::NewView => ProtocolMessage::NewView(dec(body)?),
            MessageKind::Checkpoint => ProtocolMessage::Checkpoint(dec(body)?),
            MessageKind::StateRequest => ProtocolMessage::StateRequest(dec(body)?),
            MessageKind::StateReply => ProtocolMessage::StateReply(dec(body)?),
            MessageKind::Join => ProtocolMessage::Join(dec(body)?),
            _ => return None,
        })
    }

    pub fn from_envelope(env: &SignedEnvelope) -> Option<Self> {
        Self::decode(env.kind, &env.body)
    }
}

/// Digest identifying a client request envelope.
pub fn request_digest(env: &SignedEnvelope) -> Digest {
    Digest::of_bytes(&env.body)
}

/// Check a signed client request: signature, kind, and that the claimed
/// client is the signer.
pub fn open_request(env: &SignedEnvelope, directory: &KeyDirectory) -> Option<ClientRequest> {
    if env.kind != MessageKind::Request || !env.verify(directory) {
        return None;
    }
    let req: ClientRequest = dec(&env.body)?;
    (req.client == env.sender).then_some(req)
}

/// Verify a signed envelope of `kind` and decode its payload.
pub fn open<T: DeserializeOwned>(env: &SignedEnvelope, kind: MessageKind, directory: &KeyDirectory) -> Option<T> {
    if env.kind != kind || !env.verify(directory) {
        return None;
    }
    dec(&env.body)
}

impl PrePrepare {
    /// Whether the digest matches the carried request.
    pub fn is_consistent(&self) -> bool {
        match &self.request {
            Some(r) => request_digest(r) == self.digest,
            None => self.digest == NULL_DIGEST,
        }
    }
}
