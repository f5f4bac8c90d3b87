//! Client side of ordering: stamps and signs requests, sends them to every
//! replica and waits for enough identical results.

use std::collections::BTreeMap;

use super::messages::{open, Reply};
use super::types::{ClientRequest, ExecutionResult, Membership, Operation};
use crate::codec;
use crate::crypto::{Digest, KeyDirectory, KeyPair, NodeId};
use crate::transport::{MessageKind, SignedEnvelope};

#[derive(Debug, Clone)]
pub struct Submission {
    pub timestamp_ms: u64,
    /// Id of the carried transaction, if any.
    pub tx_id: Option<Digest>,
    envelope: SignedEnvelope,
    sent_at: u64,
    replies: BTreeMap<NodeId, ExecutionResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SubmissionOutcome {
    /// `replies` holds every reply seen, including any that disagree.
    Decided { timestamp_ms: u64, tx_id: Option<Digest>, result: ExecutionResult, replies: BTreeMap<NodeId, ExecutionResult> },
    /// Replies disagree so that no result can reach the quorum any more.
    Divergent { timestamp_ms: u64, tx_id: Option<Digest>, replies: BTreeMap<NodeId, ExecutionResult> },
}

#[derive(Debug)]
pub struct OrderingClient {
    id: NodeId,
    keys: KeyPair,
    last_timestamp: u64,
    pending: BTreeMap<u64, Submission>,
    retransmit_ms: u64,
}

impl OrderingClient {
    pub fn new(id: NodeId, keys: KeyPair, retransmit_ms: u64) -> Self {
        OrderingClient { id, keys, last_timestamp: 0, pending: BTreeMap::new(), retransmit_ms }
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn is_pending(&self, tx_id: &Digest) -> bool {
        self.pending.values().any(|s| s.tx_id.as_ref() == Some(tx_id))
    }

    /// Sign `operation` and address it to every member.
    pub fn submit(&mut self, operation: Operation, now: u64, membership: &Membership) -> (u64, Vec<(NodeId, SignedEnvelope)>) {
        let timestamp_ms = now.max(self.last_timestamp + 1);
        self.last_timestamp = timestamp_ms;
        let tx_id = match &operation {
            Operation::AddTransaction(tx) => Some(tx.id()),
            Operation::Reconfigure { .. } | Operation::AddMember { .. } => None,
        };
        let req = ClientRequest { client: self.id, timestamp_ms, operation };
        let envelope = SignedEnvelope::sign(&self.keys, self.id, MessageKind::Request, codec::encode(&req));
        let out = membership.members().iter().map(|m| (*m, envelope.clone())).collect();
        self.pending.insert(timestamp_ms, Submission { timestamp_ms, tx_id, envelope, sent_at: now, replies: BTreeMap::new() });
        (timestamp_ms, out)
    }

    pub fn on_reply(&mut self, env: &SignedEnvelope, membership: &Membership, directory: &KeyDirectory) -> Option<SubmissionOutcome> {
        let reply: Reply = open(env, MessageKind::Reply, directory)?;
        if reply.client != self.id || !membership.contains(env.sender) {
            return None;
        }
        let sub = self.pending.get_mut(&reply.timestamp_ms)?;
        sub.replies.insert(env.sender, reply.result);

        let mut tally: BTreeMap<Vec<u8>, (usize, &ExecutionResult)> = BTreeMap::new();
        for r in sub.replies.values() {
            tally.entry(codec::encode(r)).or_insert((0, r)).0 += 1;
        }
        let (best, result) = tally.values().max_by_key(|(c, _)| *c).map(|(c, r)| (*c, (*r).clone()))?;
        let need = membership.reply_quorum();
        let outstanding = membership.n().saturating_sub(sub.replies.len());
        if best >= need {
            let sub = self.pending.remove(&reply.timestamp_ms)?;
            return Some(SubmissionOutcome::Decided { timestamp_ms: sub.timestamp_ms, tx_id: sub.tx_id, result, replies: sub.replies });
        }
        if best + outstanding < need {
            let sub = self.pending.remove(&reply.timestamp_ms)?;
            return Some(SubmissionOutcome::Divergent { timestamp_ms: sub.timestamp_ms, tx_id: sub.tx_id, replies: sub.replies });
        }
        None
    }

    /// Resend requests that have waited longer than the retransmit interval.
    pub fn tick(&mut self, now: u64, membership: &Membership) -> Vec<(NodeId, SignedEnvelope)> {
        let mut out = Vec::new();
        for sub in self.pending.values_mut() {
            if now >= sub.sent_at + self.retransmit_ms {
                sub.sent_at = now;
                out.extend(membership.members().iter().filter(|m| !sub.replies.contains_key(m)).map(|m| (*m, sub.envelope.clone())));
            }
        }
        out
    }
}
