use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::block::Block;
use crate::crypto::{Digest, KeyDirectory, NodeId};
use crate::workflow::{RejectReason, Transaction};

pub type View = u64;
pub type Seq = u64;

/// Digest standing in for the empty request used to fill gaps.
pub const NULL_DIGEST: Digest = Digest::ZERO;

/// Client timestamps retained per client for duplicate suppression.
pub const CLIENT_WINDOW: usize = 512;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    members: Vec<NodeId>,
    f: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum MembershipError {
    #[error("membership is empty")]
    Empty,
    #[error("{n} replicas cannot tolerate {f} faults (need at least {need})")]
    TooSmall { n: usize, f: usize, need: usize },
    #[error("duplicate member {0}")]
    Duplicate(NodeId),
    #[error("member {0} has no registered key")]
    UnknownKey(NodeId),
    #[error("{0} is already a member")]
    AlreadyMember(NodeId),
}

impl Membership {
    pub fn new(mut members: Vec<NodeId>, f: usize) -> Result<Self, MembershipError> {
        if members.is_empty() {
            return Err(MembershipError::Empty);
        }
        members.sort();
        if let Some(w) = members.windows(2).find(|w| w[0] == w[1]) {
            return Err(MembershipError::Duplicate(w[0]));
        }
        if members.len() < 3 * f + 1 {
            return Err(MembershipError::TooSmall { n: members.len(), f, need: 3 * f + 1 });
        }
        Ok(Membership { members, f })
    }

    /// `n` replicas tolerating the largest `f` with `n >= 3f + 1`.
    pub fn of_size(n: u32) -> Self {
        let f = (n as usize - 1) / 3;
        Self::new((0..n).map(NodeId).collect(), f).expect("size is consistent")
    }

    pub fn check_keys(&self, directory: &KeyDirectory) -> Result<(), MembershipError> {
        match self.members.iter().find(|m| !directory.contains(**m)) {
            Some(m) => Err(MembershipError::UnknownKey(*m)),
            None => Ok(()),
        }
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.binary_search(&node).is_ok()
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn f(&self) -> usize {
        self.f
    }

    /// Votes needed so that any two quorums share an honest replica.
    pub fn quorum(&self) -> usize {
        (self.n() + self.f + 2) / 2
    }

    /// Identical replies a client waits for.
    pub fn reply_quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn weak_quorum(&self) -> usize {
        self.f + 1
    }

    pub fn leader(&self, view: View) -> NodeId {
        self.members[(view % self.n() as u64) as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
pub enum Operation {
    AddTransaction(Transaction),
    Reconfigure { members: Vec<NodeId>, f: usize },
    /// Add one node to whatever the membership is when this executes,
    /// keeping f. Concurrent joins therefore compose.
    AddMember { node: NodeId },
}

impl Operation {
    /// Membership changes act as a barrier within their view.
    pub fn is_reconfiguration(&self) -> bool {
        matches!(self, Operation::Reconfigure { .. } | Operation::AddMember { .. })
    }
}

/// An operation submitted for ordering. `timestamp_ms` is set by the client,
/// unique per client and increasing; it also stamps any block the request
/// completes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRequest {
    pub client: NodeId,
    pub timestamp_ms: u64,
    pub operation: Operation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Accepted,
    Rejected(RejectReason),
    Reconfigured,
    ReconfigurationRefused(MembershipError),
}

/// Deterministic result of executing one request. Every honest replica
/// produces byte-identical results for the same sequence number.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub seq: Seq,
    pub outcome: Outcome,
    /// Number of the block this request completed, if any.
    pub block_number: Option<u64>,
    pub latest_block_number: u64,
    pub latest_block_hash: Digest,
    pub pending_queue_hash: Digest,
}

impl ExecutionResult {
    pub fn accepted(&self) -> bool {
        matches!(self.outcome, Outcome::Accepted | Outcome::Reconfigured)
    }
}

/// Hooks from the ordering layer into the application.
pub trait OrderingApp {
    /// Validate `tx` given the most recent queued transaction on the same
    /// subject.
    fn validate(&mut self, tx: &Transaction, pending: Option<&Transaction>) -> Result<(), RejectReason>;
    /// A block was sealed; it must be persisted and applied before the next
    /// request executes.
    fn block_created(&mut self, block: &Block);
}

/// Ordering-side ledger state: the queue of accepted transactions and the
/// head of the chain they are cut into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingState {
    pub pending: Vec<Transaction>,
    pub block_size: usize,
    pub latest_block_number: u64,
    pub latest_block_hash: Digest,
}

impl OrderingState {
    pub fn new(block_size: usize) -> Self {
        assert!(block_size > 0, "block size must be positive");
        OrderingState {
            pending: Vec::new(),
            block_size,
            latest_block_number: 0,
            latest_block_hash: Block::genesis().hash,
        }
    }

    pub fn pending_hash(&self) -> Digest {
        Digest::of(&self.pending)
    }

    /// Queue `tx` if valid, sealing a block once the queue is full.
    pub fn add_transaction(
        &mut self,
        tx: Transaction,
        timestamp_ms: u64,
        app: &mut dyn OrderingApp,
    ) -> Result<Option<Block>, RejectReason> {
        let id = tx.id();
        if self.pending.iter().any(|p| p.id() == id) {
            return Err(RejectReason::DuplicateTransaction);
        }
        let previous = self.pending.iter().rev().find(|p| p.same_subject(&tx));
        app.validate(&tx, previous)?;
        self.pending.push(tx);
        if self.pending.len() < self.block_size {
            return Ok(None);
        }
        let block = Block::build(
            self.latest_block_number + 1,
            self.latest_block_hash,
            std::mem::take(&mut self.pending),
            timestamp_ms,
        );
        self.latest_block_number = block.number;
        self.latest_block_hash = block.hash;
        app.block_created(&block);
        Ok(Some(block))
    }
}

/// Everything that must agree across replicas after executing a prefix of
/// the log. Its digest is what checkpoints attest to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicatedState {
    pub last_executed: Seq,
    pub ordering: OrderingState,
    pub membership: Membership,
    /// Membership changes as (sequence number of the change, new membership).
    pub history: Vec<(Seq, Membership)>,
    pub clients: BTreeMap<NodeId, BTreeMap<u64, ExecutionResult>>,
}

/// What a replica should do with an incoming request given the client table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestStatus {
    New,
    Executed(ExecutionResult),
    /// Older than anything retained for this client.
    Stale,
}

impl ReplicatedState {
    pub fn genesis(membership: Membership, block_size: usize) -> Self {
        ReplicatedState {
            last_executed: 0,
            ordering: OrderingState::new(block_size),
            history: vec![(0, membership.clone())],
            membership,
            clients: BTreeMap::new(),
        }
    }

    pub fn digest(&self) -> Digest {
        Digest::of(self)
    }

    pub fn request_status(&self, client: NodeId, timestamp_ms: u64) -> RequestStatus {
        let Some(table) = self.clients.get(&client) else { return RequestStatus::New };
        if let Some(r) = table.get(&timestamp_ms) {
            return RequestStatus::Executed(r.clone());
        }
        match table.keys().next() {
            Some(&lowest) if table.len() >= CLIENT_WINDOW && timestamp_ms < lowest => RequestStatus::Stale,
            _ => RequestStatus::New,
        }
    }

    /// Execute the request ordered at `seq` (or a gap filler when `None`).
    /// Returns `None` for gap fillers and duplicates, which change nothing
    /// but the execution counter.
    pub fn execute(
        &mut self,
        seq: Seq,
        request: Option<&ClientRequest>,
        directory: &KeyDirectory,
        app: &mut dyn OrderingApp,
    ) -> Option<ExecutionResult> {
        debug_assert_eq!(seq, self.last_executed + 1);
        self.last_executed = seq;
        let request = request?;
        if self.request_status(request.client, request.timestamp_ms) != RequestStatus::New {
            return None;
        }
        let mut block_number = None;
        let outcome = match &request.operation {
            Operation::AddTransaction(tx) => {
                match self.ordering.add_transaction(tx.clone(), request.timestamp_ms, app) {
                    Ok(block) => {
                        block_number = block.map(|b| b.number);
                        Outcome::Accepted
                    }
                    Err(reason) => Outcome::Rejected(reason),
                }
            }
            Operation::Reconfigure { .. } | Operation::AddMember { .. } => {
                let proposed = match &request.operation {
                    Operation::Reconfigure { members, f } => Membership::new(members.clone(), *f),
                    Operation::AddMember { node } if self.membership.contains(*node) => {
                        Err(MembershipError::AlreadyMember(*node))
                    }
                    Operation::AddMember { node } => {
                        let mut members = self.membership.members().to_vec();
                        members.push(*node);
                        Membership::new(members, self.membership.f())
                    }
                    Operation::AddTransaction(_) => unreachable!(),
                };
                match proposed.and_then(|m| m.check_keys(directory).map(|_| m)) {
                    Ok(m) => {
                        self.history.push((seq, m.clone()));
                        self.membership = m;
                        Outcome::Reconfigured
                    }
                    Err(e) => Outcome::ReconfigurationRefused(e),
                }
            }
        };
        let result = ExecutionResult {
            seq,
            outcome,
            block_number,
            latest_block_number: self.ordering.latest_block_number,
            latest_block_hash: self.ordering.latest_block_hash,
            pending_queue_hash: self.ordering.pending_hash(),
        };
        let table = self.clients.entry(request.client).or_default();
        table.insert(request.timestamp_ms, result.clone());
        while table.len() > CLIENT_WINDOW {
            table.pop_first();
        }
        Some(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::workflow::{sequence_net, TxBody};

    struct AcceptAll(Vec<Block>);

    impl OrderingApp for AcceptAll {
        fn validate(&mut self, _: &Transaction, _: Option<&Transaction>) -> Result<(), RejectReason> {
            Ok(())
        }
        fn block_created(&mut self, block: &Block) {
            self.0.push(block.clone());
        }
    }

    fn tx(i: u32) -> Transaction {
        Transaction::sign(TxBody::ModelUpdate(sequence_net(&format!("m{i}"), 0, 1)), NodeId(0), &KeyPair::for_test(NodeId(0)))
    }

    #[test]
    fn quorum_sizes() {
        for (n, f, q) in [(1, 0, 1), (3, 0, 2), (4, 1, 3), (5, 1, 4), (6, 1, 4), (7, 2, 5), (10, 3, 7)] {
            let m = Membership::new((0..n).map(NodeId).collect(), f).unwrap();
            assert_eq!(m.quorum(), q, "n={n} f={f}");
            // Two quorums overlap in at least f + 1 replicas.
            assert!(2 * q > n as usize + f);
        }
        assert_eq!(
            Membership::new((0..3).map(NodeId).collect(), 1),
            Err(MembershipError::TooSmall { n: 3, f: 1, need: 4 })
        );
    }

    #[test]
    fn blocks_cut_at_block_size() {
        let mut s = OrderingState::new(3);
        let mut app = AcceptAll(Vec::new());
        assert_eq!(s.add_transaction(tx(1), 10, &mut app), Ok(None));
        assert_eq!(s.add_transaction(tx(1), 11, &mut app), Err(RejectReason::DuplicateTransaction));
        assert_eq!(s.add_transaction(tx(2), 12, &mut app), Ok(None));
        let b = s.add_transaction(tx(3), 13, &mut app).unwrap().unwrap();
        assert_eq!((b.number, b.timestamp_ms, b.transactions.len()), (1, 13, 3));
        assert_eq!(b.previous_hash, Block::genesis().hash);
        assert!(s.pending.is_empty());
        assert_eq!(app.0, vec![b]);
    }

    #[test]
    fn duplicates_not_reexecuted() {
        let dir = KeyDirectory::for_test(4);
        let mut s = ReplicatedState::genesis(Membership::of_size(4), 1);
        let mut app = AcceptAll(Vec::new());
        let req = ClientRequest { client: NodeId(2), timestamp_ms: 5, operation: Operation::AddTransaction(tx(1)) };
        let r = s.execute(1, Some(&req), &dir, &mut app).unwrap();
        assert_eq!(r.block_number, Some(1));
        assert_eq!(s.execute(2, Some(&req), &dir, &mut app), None);
        assert_eq!(s.execute(3, None, &dir, &mut app), None);
        assert_eq!(s.last_executed, 3);
        assert_eq!(app.0.len(), 1);
        assert_eq!(s.request_status(NodeId(2), 5), RequestStatus::Executed(r));
    }

    #[test]
    fn reconfiguration_checked() {
        let dir = KeyDirectory::for_test(5);
        let mut s = ReplicatedState::genesis(Membership::of_size(4), 1);
        let mut app = AcceptAll(Vec::new());
        let bad = ClientRequest {
            client: NodeId(0),
            timestamp_ms: 1,
            operation: Operation::Reconfigure { members: vec![NodeId(0), NodeId(1)], f: 1 },
        };
        let r = s.execute(1, Some(&bad), &dir, &mut app).unwrap();
        assert!(matches!(r.outcome, Outcome::ReconfigurationRefused(MembershipError::TooSmall { .. })));
        let good = ClientRequest {
            client: NodeId(0),
            timestamp_ms: 2,
            operation: Operation::Reconfigure { members: (0..5).map(NodeId).collect(), f: 1 },
        };
        assert_eq!(s.execute(2, Some(&good), &dir, &mut app).unwrap().outcome, Outcome::Reconfigured);
        assert_eq!(s.membership.n(), 5);
        assert_eq!(s.history.len(), 2);
    }
}
