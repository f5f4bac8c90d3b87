use super::store::{BlockStore, StoreError};
use super::sync::{BlockMessage, Outbound, SyncSession, SyncStatus};
use super::Block;
use crate::crypto::{Digest, NodeId};
use crate::workflow::Transaction;

/// Owns the local chain: appends blocks produced by ordering, answers peer
/// requests and runs catch-up sessions.
#[derive(Debug)]
pub struct BlockService {
    store: BlockStore,
    sync: Option<SyncSession>,
}

#[derive(Debug, Default)]
pub struct BlockEvents {
    /// Blocks newly added to the chain, in order.
    pub applied: Vec<Block>,
    pub outbound: Vec<Outbound>,
}

impl BlockService {
    pub fn new(store: BlockStore) -> Self {
        BlockService { store, sync: None }
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut BlockStore {
        &mut self.store
    }

    pub fn head_number(&self) -> u64 {
        self.store.head_number()
    }

    pub fn head_hash(&self) -> Digest {
        self.store.head_hash()
    }

    /// Seal and append the next block from ordered transactions.
    pub fn create_block(&mut self, transactions: Vec<Transaction>, timestamp_ms: u64) -> Result<Block, StoreError> {
        let block = Block::build(self.store.head_number() + 1, self.store.head_hash(), transactions, timestamp_ms);
        self.store.append(block.clone())?;
        Ok(block)
    }

    pub fn sync_status(&self) -> Option<SyncStatus> {
        self.sync.as_ref().map(SyncSession::status)
    }

    pub fn is_syncing(&self) -> bool {
        self.sync_status() == Some(SyncStatus::InProgress)
    }

    /// Begin catching up to `target` using `peers`.
    pub fn start_sync(&mut self, target: u64, hash: Option<Digest>, peers: Vec<NodeId>, seed: u64, now: u64) -> Vec<Outbound> {
        let mut s = SyncSession::new(target, hash, peers, seed);
        let out = s.poll(now, &self.store);
        self.sync = Some(s);
        out
    }

    pub fn tick(&mut self, now: u64) -> Vec<Outbound> {
        match &mut self.sync {
            Some(s) => s.tick(now, &self.store),
            None => Vec::new(),
        }
    }

    pub fn handle(&mut self, from: NodeId, msg: BlockMessage, now: u64) -> BlockEvents {
        let mut ev = BlockEvents::default();
        match msg {
            BlockMessage::BlockchainRequest { from: lo, to } => {
                let blocks = self.store.serve_range(lo, to);
                if !blocks.is_empty() {
                    ev.outbound.push((from, BlockMessage::BlockchainSend { blocks }));
                }
            }
            BlockMessage::BlockRequest { hash } => {
                if let Some(block) = self.store.serve_hash(&hash) {
                    ev.outbound.push((from, BlockMessage::BlockSend { block }));
                }
            }
            BlockMessage::BlockSend { block } => self.receive(from, vec![block], now, &mut ev),
            BlockMessage::BlockchainSend { blocks } => self.receive(from, blocks, now, &mut ev),
        }
        ev
    }

    fn receive(&mut self, from: NodeId, blocks: Vec<Block>, now: u64, ev: &mut BlockEvents) {
        match &mut self.sync {
            Some(s) if s.status() == SyncStatus::InProgress => {
                let (applied, out) = s.on_blocks(from, blocks, &mut self.store, now);
                ev.applied = applied;
                ev.outbound = out;
            }
            _ => tracing::debug!(%from, "unsolicited blocks ignored"),
        }
    }
}
