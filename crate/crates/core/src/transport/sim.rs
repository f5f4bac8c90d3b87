//! Deterministic discrete-event network for simulations.
//!
//! Messages on one directed link are delivered in send order. Everything
//! random (delays, drops) comes from one seeded generator, so a run is fully
//! determined by its seed and inputs.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use super::{MessageKind, SignedEnvelope};
use crate::crypto::{Digest, NodeId};

/// A fault injected at one node.
#[derive(Clone, Debug, PartialEq)]
pub enum Fault {
    /// Stop sending and receiving from this time on.
    Crash { at_ms: u64 },
    /// Lose each outgoing message with probability `p`.
    Drop { p: f64 },
    /// Add a uniformly random extra delay to each outgoing message.
    Delay { min_ms: u64, max_ms: u64 },
    /// Send conflicting versions of outgoing messages of these kinds. The
    /// rewriting itself is done by whoever owns the node's keys.
    Equivocate { kinds: Vec<MessageKind> },
    /// Cut links to `peers` (all peers if empty) during `[from_ms, until_ms)`.
    Partition { from_ms: u64, until_ms: u64, peers: Vec<NodeId> },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultPlan {
    faults: BTreeMap<NodeId, Vec<Fault>>,
}

impl FaultPlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, node: NodeId, fault: Fault) -> Self {
        self.faults.entry(node).or_default().push(fault);
        self
    }

    pub fn faults(&self, node: NodeId) -> &[Fault] {
        self.faults.get(&node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_faulty(&self, node: NodeId) -> bool {
        !self.faults(node).is_empty()
    }

    pub fn crashed(&self, node: NodeId, now: u64) -> bool {
        self.faults(node).iter().any(|f| matches!(f, Fault::Crash { at_ms } if now >= *at_ms))
    }

    pub fn equivocates(&self, node: NodeId, kind: MessageKind) -> bool {
        self.faults(node).iter().any(|f| matches!(f, Fault::Equivocate { kinds } if kinds.contains(&kind)))
    }

    fn partitioned(&self, a: NodeId, b: NodeId, now: u64) -> bool {
        let cut = |x: NodeId, y: NodeId| {
            self.faults(x).iter().any(|f| match f {
                Fault::Partition { from_ms, until_ms, peers } => {
                    now >= *from_ms && now < *until_ms && (peers.is_empty() || peers.contains(&y))
                }
                _ => false,
            })
        };
        cut(a, b) || cut(b, a)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery {
    pub at: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub envelope: SignedEnvelope,
}

#[derive(Debug, PartialEq, Eq)]
struct Queued {
    at: u64,
    order: u64,
    delivery: Delivery,
}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.order).cmp(&(other.at, other.order))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
pub struct SimNetwork {
    rng: ChaCha8Rng,
    queue: BinaryHeap<Reverse<Queued>>,
    order: u64,
    link_last: BTreeMap<(NodeId, NodeId), u64>,
    base_delay: (u64, u64),
    plan: FaultPlan,
    transcript: Sha256,
    delivered: u64,
    dropped: u64,
}

impl SimNetwork {
    /// `base_delay` is the inclusive range of per-message latency in ms.
    pub fn new(seed: u64, base_delay: (u64, u64), plan: FaultPlan) -> Self {
        SimNetwork {
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BinaryHeap::new(),
            order: 0,
            link_last: BTreeMap::new(),
            base_delay,
            plan,
            transcript: Sha256::new(),
            delivered: 0,
            dropped: 0,
        }
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn send(&mut self, now: u64, from: NodeId, to: NodeId, envelope: SignedEnvelope) {
        if from == to {
            self.enqueue(now, from, to, envelope);
            return;
        }
        if self.plan.crashed(from, now) || self.plan.partitioned(from, to, now) {
            self.dropped += 1;
            return;
        }
        let mut extra = 0;
        for fault in self.plan.faults(from) {
            match fault {
                Fault::Drop { p } => {
                    if self.rng.gen_bool(*p) {
                        self.dropped += 1;
                        return;
                    }
                }
                Fault::Delay { min_ms, max_ms } => extra += self.rng.gen_range(*min_ms..=*max_ms),
                _ => {}
            }
        }
        let (lo, hi) = self.base_delay;
        let delay = self.rng.gen_range(lo..=hi) + extra;
        let last = self.link_last.entry((from, to)).or_insert(0);
        let at = (now + delay).max(*last);
        *last = at;
        self.enqueue(at, from, to, envelope);
    }

    fn enqueue(&mut self, at: u64, from: NodeId, to: NodeId, envelope: SignedEnvelope) {
        self.order += 1;
        self.queue.push(Reverse(Queued { at, order: self.order, delivery: Delivery { at, from, to, envelope } }));
    }

    pub fn next_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(q)| q.at)
    }

    /// Pop the next delivery due at or before `until`.
    pub fn pop(&mut self, until: u64) -> Option<Delivery> {
        if self.next_time()? > until {
            return None;
        }
        let Reverse(q) = self.queue.pop()?;
        let d = q.delivery;
        if self.plan.crashed(d.to, d.at) || (d.from != d.to && self.plan.partitioned(d.from, d.to, d.at)) {
            self.dropped += 1;
            return self.pop(until);
        }
        self.delivered += 1;
        self.transcript.update(d.at.to_be_bytes());
        self.transcript.update(d.from.0.to_be_bytes());
        self.transcript.update(d.to.0.to_be_bytes());
        self.transcript.update(d.envelope.to_frame());
        Some(d)
    }

    /// Hash over every delivery so far, in order.
    pub fn transcript(&self) -> Digest {
        Digest(self.transcript.clone().finalize().into())
    }

    pub fn stats(&self) -> (u64, u64) {
        (self.delivered, self.dropped)
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}
