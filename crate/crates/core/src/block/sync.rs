//! Catching up on blocks from peers.
//!
//! The session first asks a growing number of randomly chosen peers for the
//! whole missing range. Holes left by partial answers are filled by asking
//! the most recent responder, then everyone.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::store::{BlockStore, StoreError};
use super::Block;
use crate::codec;
use crate::crypto::{Digest, NodeId};
use crate::transport::MessageKind;

/// Milliseconds to wait for an answer before escalating.
pub const FETCH_TIMEOUT_MS: u64 = 2_000;
/// Unanswered rounds tolerated before the session gives up.
pub const RETRY_BUDGET: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlockMessage {
    BlockRequest { hash: Digest },
    BlockSend { block: Block },
    BlockchainRequest { from: u64, to: u64 },
    BlockchainSend { blocks: Vec<Block> },
}

impl BlockMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            BlockMessage::BlockRequest { .. } => MessageKind::BlockRequest,
            BlockMessage::BlockSend { .. } => MessageKind::BlockSend,
            BlockMessage::BlockchainRequest { .. } => MessageKind::BlockchainRequest,
            BlockMessage::BlockchainSend { .. } => MessageKind::BlockchainSend,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn decode(kind: MessageKind, body: &[u8]) -> Option<Self> {
        let msg: BlockMessage = codec::decode(body).ok()?;
        (msg.kind() == kind).then_some(msg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyncStatus {
    InProgress,
    Complete,
    /// Retry budget exhausted.
    Stalled,
    /// Reached the target height but on a different chain.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Outstanding {
    request: (u64, u64),
    deadline: u64,
    broadcast: bool,
}

#[derive(Debug)]
pub struct SyncSession {
    target_number: u64,
    target_hash: Option<Digest>,
    peers: Vec<NodeId>,
    rng: ChaCha8Rng,
    fanout: usize,
    last_responder: Option<NodeId>,
    outstanding: Option<Outstanding>,
    failed_rounds: u32,
    status: SyncStatus,
}

pub type Outbound = (NodeId, BlockMessage);

impl SyncSession {
    pub fn new(target_number: u64, target_hash: Option<Digest>, peers: Vec<NodeId>, seed: u64) -> Self {
        SyncSession {
            target_number,
            target_hash,
            peers,
            rng: ChaCha8Rng::seed_from_u64(seed),
            fanout: 1,
            last_responder: None,
            outstanding: None,
            failed_rounds: 0,
            status: SyncStatus::InProgress,
        }
    }

    pub fn status(&self) -> SyncStatus {
        self.status
    }

    pub fn target(&self) -> (u64, Option<Digest>) {
        (self.target_number, self.target_hash)
    }

    /// Raise the target, e.g. when a peer reports a newer head.
    pub fn extend_target(&mut self, number: u64, hash: Option<Digest>) {
        if number > self.target_number {
            self.target_number = number;
            self.target_hash = hash;
            if self.status == SyncStatus::Complete {
                self.status = SyncStatus::InProgress;
            }
        }
    }

    fn check_done(&mut self, store: &BlockStore) -> bool {
        if store.head_number() < self.target_number {
            return false;
        }
        let on_target = store.get(self.target_number).map(|b| b.hash);
        self.status = match self.target_hash {
            Some(h) if on_target != Some(h) => SyncStatus::Diverged,
            _ => SyncStatus::Complete,
        };
        self.outstanding = None;
        true
    }

    /// Issue the next request if nothing equivalent is outstanding.
    pub fn poll(&mut self, now: u64, store: &BlockStore) -> Vec<Outbound> {
        if self.status != SyncStatus::InProgress || self.check_done(store) {
            return Vec::new();
        }
        let head = store.head_number();
        let (request, gap_hash) = match store.lowest_buffered() {
            Some(b) if b.number > head + 1 && b.number <= self.target_number + 1 => {
                ((head + 1, b.number - 1), (b.number == head + 2).then_some(b.previous_hash))
            }
            _ => ((head + 1, self.target_number), None),
        };
        if let Some(o) = &self.outstanding {
            if o.request == request && now < o.deadline {
                return Vec::new();
            }
        }
        let msg = match gap_hash {
            Some(hash) => BlockMessage::BlockRequest { hash },
            None => BlockMessage::BlockchainRequest { from: request.0, to: request.1 },
        };
        let is_gap = request.1 < self.target_number;
        let broadcast = is_gap && self.outstanding.as_ref().is_some_and(|o| o.request == request);
        let recipients: Vec<NodeId> = if let Some(r) = self.last_responder.filter(|_| is_gap && !broadcast) {
            vec![r]
        } else if is_gap {
            self.peers.clone()
        } else {
            let mut p = self.peers.clone();
            p.shuffle(&mut self.rng);
            p.truncate(self.fanout.max(1));
            p
        };
        self.outstanding = Some(Outstanding { request, deadline: now + FETCH_TIMEOUT_MS, broadcast });
        recipients.into_iter().map(|p| (p, msg.clone())).collect()
    }

    /// Escalate if the outstanding request timed out.
    pub fn tick(&mut self, now: u64, store: &BlockStore) -> Vec<Outbound> {
        if self.status != SyncStatus::InProgress {
            return Vec::new();
        }
        if let Some(o) = &self.outstanding {
            if now < o.deadline {
                return Vec::new();
            }
            self.failed_rounds += 1;
            if self.failed_rounds > RETRY_BUDGET {
                tracing::warn!(target = self.target_number, head = store.head_number(), "block sync stalled");
                self.status = SyncStatus::Stalled;
                return Vec::new();
            }
            self.fanout = (self.fanout * 2).min(self.peers.len().max(1));
            if o.broadcast {
                // Broadcast already tried for this gap; start over with a fresh round.
                self.outstanding = None;
                self.last_responder = None;
            }
        }
        self.poll(now, store)
    }

    /// Feed blocks received from `from` into `store`.
    pub fn on_blocks(&mut self, from: NodeId, blocks: Vec<Block>, store: &mut BlockStore, now: u64) -> (Vec<Block>, Vec<Outbound>) {
        let mut applied = Vec::new();
        let before = (store.head_number(), store.buffered().count());
        for b in blocks {
            if b.number > self.target_number {
                continue;
            }
            match store.receive_block(b) {
                Ok(mut a) => applied.append(&mut a),
                Err(StoreError::LinkageMismatch { number }) => {
                    tracing::warn!(%from, number, "block from peer does not link, discarding buffered blocks");
                    store.clear_buffer();
                    break;
                }
                Err(e) => {
                    tracing::debug!(%from, error = %e, "ignoring block");
                }
            }
        }
        let progressed = (store.head_number(), store.buffered().count()) != before;
        if progressed {
            self.last_responder = Some(from);
            self.failed_rounds = 0;
        }
        let out = self.poll(now, store);
        (applied, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(len: u64) -> Vec<Block> {
        let mut out = vec![Block::genesis()];
        for n in 1..=len {
            let prev = out.last().unwrap().hash;
            out.push(Block::build(n, prev, Vec::new(), n));
        }
        out
    }

    fn donor(blocks: &[Block], serve: Option<std::ops::RangeInclusive<u64>>) -> BlockStore {
        let mut s = BlockStore::in_memory();
        for b in &blocks[1..] {
            s.append(b.clone()).unwrap();
        }
        s.restrict_serving(serve);
        s
    }

    fn answer(store: &BlockStore, msg: &BlockMessage) -> Option<Vec<Block>> {
        match msg {
            BlockMessage::BlockchainRequest { from, to } => Some(store.serve_range(*from, *to)).filter(|v| !v.is_empty()),
            BlockMessage::BlockRequest { hash } => store.serve_hash(hash).map(|b| vec![b]),
            _ => None,
        }
    }

    /// Drive a session against donors with instantaneous replies; time only
    /// advances when nobody answers.
    fn run(donors: &[(NodeId, BlockStore)], target: &Block) -> (BlockStore, SyncStatus) {
        let mut store = BlockStore::in_memory();
        let peers = donors.iter().map(|(id, _)| *id).collect();
        let mut s = SyncSession::new(target.number, Some(target.hash), peers, 7);
        let mut now = 0;
        let mut queue = s.poll(now, &store);
        for _ in 0..10_000 {
            if s.status() != SyncStatus::InProgress {
                break;
            }
            if queue.is_empty() {
                now += FETCH_TIMEOUT_MS;
                queue = s.tick(now, &store);
                continue;
            }
            let (to, msg) = queue.remove(0);
            let d = &donors.iter().find(|(id, _)| *id == to).unwrap().1;
            if let Some(blocks) = answer(d, &msg) {
                let (_, mut more) = s.on_blocks(to, blocks, &mut store, now);
                queue.append(&mut more);
            }
        }
        (store, s.status())
    }

    #[test]
    fn full_donors() {
        let blocks = chain(50);
        let donors: Vec<_> = (1..4).map(|i| (NodeId(i), donor(&blocks, None))).collect();
        let (store, status) = run(&donors, &blocks[50]);
        assert_eq!(status, SyncStatus::Complete);
        assert_eq!(store.chain().cloned().collect::<Vec<_>>(), blocks);
    }

    #[test]
    fn single_responsive_donor() {
        let blocks = chain(50);
        let donors = vec![
            (NodeId(1), donor(&blocks, Some(0..=0))),
            (NodeId(2), donor(&blocks, None)),
            (NodeId(3), donor(&blocks, Some(0..=0))),
        ];
        let (store, status) = run(&donors, &blocks[50]);
        assert_eq!(status, SyncStatus::Complete);
        assert_eq!(store.head_hash(), blocks[50].hash);
    }

    #[test]
    fn split_segments() {
        let blocks = chain(50);
        let donors = vec![(NodeId(1), donor(&blocks, Some(26..=50))), (NodeId(2), donor(&blocks, Some(1..=25)))];
        let (store, status) = run(&donors, &blocks[50]);
        assert_eq!(status, SyncStatus::Complete);
        assert!(store.verify().is_intact());
        assert_eq!(store.chain().count(), 51);
    }

    #[test]
    fn single_block_gap_uses_hash_request() {
        let blocks = chain(3);
        let mut store = BlockStore::in_memory();
        store.receive_block(blocks[1].clone()).unwrap();
        store.receive_block(blocks[3].clone()).unwrap();
        let mut s = SyncSession::new(3, None, vec![NodeId(1), NodeId(2)], 1);
        let out = s.poll(0, &store);
        assert_eq!(out.len(), 2, "no responder yet, so everyone is asked");
        assert!(out.iter().all(|(_, m)| *m == BlockMessage::BlockRequest { hash: blocks[2].hash }));
    }

    #[test]
    fn stalls_without_donors() {
        let blocks = chain(5);
        let donors = vec![(NodeId(1), donor(&blocks, Some(0..=0)))];
        let (_, status) = run(&donors, &blocks[5]);
        assert_eq!(status, SyncStatus::Stalled);
    }

    #[test]
    fn diverged_target_detected() {
        let blocks = chain(5);
        let donors = vec![(NodeId(1), donor(&blocks, None))];
        let mut fake = blocks[5].clone();
        fake.hash = Digest::of_bytes(b"other");
        let (_, status) = run(&donors, &fake);
        assert_eq!(status, SyncStatus::Diverged);
    }

    #[test]
    fn message_kind_checked_on_decode() {
        let m = BlockMessage::BlockchainRequest { from: 1, to: 2 };
        assert_eq!(BlockMessage::decode(MessageKind::BlockchainRequest, &m.encode()), Some(m.clone()));
        assert_eq!(BlockMessage::decode(MessageKind::BlockRequest, &m.encode()), None);
    }
}
