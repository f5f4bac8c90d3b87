//! One ledger node without any I/O: ordering replica and client, block
//! service and workflow engine wired together. Callers feed it envelopes and
//! clock ticks and send whatever it returns.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use crate::block::{Block, BlockMessage, BlockService, BlockStore, ChainFailure, SyncStatus};
use crate::crypto::{Digest, KeyDirectory, KeyPair, NodeId};
use crate::ordering::{
    Membership, Operation, OrderingApp, OrderingClient, Outcome, Replica, ReplicaConfig, ReplicaEvent,
};
use crate::ordering::client::SubmissionOutcome;
use crate::ordering::messages::Reply;
use crate::codec;
use crate::transport::{Channel, MessageKind, SignedEnvelope};
use crate::workflow::{
    CaseId, CaseState, DataMap, Engine, EngineEffect, EngineError, HostRegistry, RejectReason, Transaction, WorkItem,
    WorkItemId, WorkflowModel,
};

pub type Outbound = Vec<(NodeId, SignedEnvelope)>;

#[derive(Clone, Debug)]
pub struct NodeParams {
    pub id: NodeId,
    pub keys: KeyPair,
    pub directory: Arc<KeyDirectory>,
    /// Members of the initial configuration.
    pub membership: Membership,
    pub block_size: usize,
    pub registry: HostRegistry,
    /// Fetch state from peers before taking part.
    pub join: bool,
    /// Seed for peer selection during sync and case id nonces.
    pub seed: u64,
    pub request_timeout_ms: u64,
    pub view_change_timeout_ms: u64,
    pub checkpoint_interval: u64,
}

impl NodeParams {
    /// Parameters for node `id` of an `n`-node test cluster using test keys.
    pub fn for_test(id: u32, n: u32, block_size: usize) -> Self {
        NodeParams {
            id: NodeId(id),
            keys: KeyPair::for_test(NodeId(id)),
            directory: Arc::new(KeyDirectory::for_test(n)),
            membership: Membership::of_size(n),
            block_size,
            registry: HostRegistry::with_builtins(),
            join: false,
            seed: id as u64,
            request_timeout_ms: 500,
            view_change_timeout_ms: 1_000,
            checkpoint_interval: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeStatus {
    Running,
    /// Fetching state and blocks; the node does not execute requests.
    Recovering,
    Halted(String),
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("stored chain is damaged at block {}: {:?}", .0.at, .0.kind)]
    ChainCorrupt(ChainFailure),
    #[error("stored chain exists but no peer is configured to recover ordering state from")]
    NoRecoverySource,
    #[error("model `{0}` already installed")]
    DuplicateModel(String),
    #[error("node is recovering")]
    Recovering,
    #[error("node halted: {0}")]
    Halted(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Notifications for observers such as the worklist API.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeEvent {
    WorkItemAdded(WorkItem),
    WorkItemWithdrawn(WorkItemId),
    WorkItemCompleted(WorkItemId),
    CaseUpdated(CaseState),
    /// The replica executed sequence number `seq`; `request` is the digest
    /// of the ordered request, zero for a null request.
    Ordered { seq: u64, request: Digest },
    BlockApplied { number: u64, hash: Digest, transactions: usize },
    PendingTxChanged { pending: usize },
    ViewChanged(u64),
    MembershipChanged(Vec<NodeId>),
    TransactionDecided { tx_id: Digest, accepted: bool, reason: Option<RejectReason> },
    /// Replies for a submission disagree; the local chain was checked.
    Divergence { timestamp_ms: u64, tx_id: Option<Digest> },
    /// The local replica's reply differed from the decided result. The
    /// replica was discarded and the node is rejoining.
    SelfCheckFailed { timestamp_ms: u64 },
    ExternalCallFailed { work_item: WorkItemId, error: String },
    StatusChanged(NodeStatus),
}

struct App<'a> {
    engine: &'a mut Engine,
    blocks: &'a mut BlockService,
    effects: Vec<EngineEffect>,
    applied: Vec<Block>,
    failure: Option<String>,
}

impl OrderingApp for App<'_> {
    fn validate(&mut self, tx: &Transaction, pending: Option<&Transaction>) -> Result<(), RejectReason> {
        self.engine.validate_transaction(tx, pending)
    }

    fn block_created(&mut self, block: &Block) {
        match self.blocks.store().get(block.number) {
            Some(b) if b.hash == block.hash => {}
            stored => {
                // The consensus chain is authoritative; a conflicting local
                // suffix was never attested and is dropped.
                if stored.is_some() {
                    tracing::warn!(number = block.number, "stored block conflicts with the ordered one, discarding local suffix");
                    if let Err(e) = self.blocks.store_mut().discard_from(block.number) {
                        self.failure = Some(format!("cannot discard conflicting blocks: {e}"));
                        return;
                    }
                }
                if let Err(e) = self.blocks.store_mut().append(block.clone()) {
                    self.failure = Some(format!("cannot store ordered block {}: {e}", block.number));
                    return;
                }
            }
        }
        if self.engine.last_applied_block().is_none_or(|n| n < block.number) {
            self.effects.extend(self.engine.apply_block(block));
            self.applied.push(block.clone());
        }
    }
}

pub struct Node {
    id: NodeId,
    keys: KeyPair,
    directory: Arc<KeyDirectory>,
    replica: Replica,
    client: OrderingClient,
    blocks: BlockService,
    engine: Engine,
    status: NodeStatus,
    join: bool,
    catch_up: Option<(u64, Digest)>,
    sync_round: u64,
    seed: u64,
    events: Vec<NodeEvent>,
    now: u64,
    replica_config: ReplicaConfig,
    registry: HostRegistry,
    rejoins: u64,
    /// Joiners we asked the cluster to admit, with when we asked.
    admitting: BTreeMap<NodeId, u64>,
    next_announce: u64,
    corrupt_next_local_reply: bool,
    last_submission: Option<Digest>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.id)
            .field("status", &self.status)
            .field("replica", &self.replica)
            .field("head", &self.blocks.head_number())
            .finish()
    }
}

impl Node {
    pub fn new(params: NodeParams, store: BlockStore) -> Result<Self, NodeError> {
        let verification = store.verify();
        if let Some(failure) = verification.failure {
            return Err(NodeError::ChainCorrupt(failure));
        }
        let others = params.membership.members().iter().any(|m| *m != params.id);
        let join = params.join || store.head_number() > 0;
        if join && !others {
            return Err(NodeError::NoRecoverySource);
        }
        let mut rc = ReplicaConfig::new(params.id, params.membership.clone(), params.block_size);
        rc.request_timeout_ms = params.request_timeout_ms;
        rc.view_change_timeout_ms = params.view_change_timeout_ms;
        rc.checkpoint_interval = params.checkpoint_interval;
        let replica = Replica::new(rc.clone(), params.keys.clone(), params.directory.clone());
        let client = OrderingClient::new(params.id, params.keys.clone(), 2 * params.request_timeout_ms);
        let engine =
            Engine::with_nonce_seed(params.id, params.keys.clone(), params.directory.clone(), params.registry.clone(), params.seed);
        Ok(Node {
            id: params.id,
            keys: params.keys,
            directory: params.directory,
            replica,
            client,
            blocks: BlockService::new(store),
            engine,
            status: if join { NodeStatus::Recovering } else { NodeStatus::Running },
            join,
            catch_up: None,
            sync_round: 0,
            seed: params.seed,
            events: Vec::new(),
            now: 0,
            replica_config: rc,
            registry: params.registry,
            rejoins: 0,
            admitting: BTreeMap::new(),
            next_announce: 0,
            corrupt_next_local_reply: false,
            last_submission: None,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn status(&self) -> &NodeStatus {
        &self.status
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn blocks(&self) -> &BlockService {
        &self.blocks
    }

    pub fn store(&self) -> &BlockStore {
        self.blocks.store()
    }

    pub fn replica(&self) -> &Replica {
        &self.replica
    }

    pub fn membership(&self) -> &Membership {
        self.replica.membership()
    }

    pub fn pending_queue_len(&self) -> usize {
        self.replica.state().ordering.pending.len()
    }

    /// Submissions still waiting for a reply quorum.
    pub fn outstanding_submissions(&self) -> usize {
        self.client.pending()
    }

    pub fn drain_events(&mut self) -> Vec<NodeEvent> {
        std::mem::take(&mut self.events)
    }

    /// Test hook: restrict which blocks this node serves to peers.
    pub fn restrict_block_serving(&mut self, range: Option<std::ops::RangeInclusive<u64>>) {
        self.blocks.store_mut().restrict_serving(range);
    }

    /// Fault injection: the next reply from the local replica to the local
    /// client is altered, as if the replica were faulty.
    pub fn corrupt_next_local_reply(&mut self) {
        self.corrupt_next_local_reply = true;
    }

    fn announce_interval(&self) -> u64 {
        4 * self.replica_config.request_timeout_ms
    }

    fn set_status(&mut self, status: NodeStatus) {
        if self.status != status {
            tracing::info!(node = %self.id, ?status, "status changed");
            self.status = status.clone();
            self.events.push(NodeEvent::StatusChanged(status));
        }
    }

    fn halt(&mut self, reason: String) {
        tracing::error!(node = %self.id, %reason, "halting");
        self.set_status(NodeStatus::Halted(reason));
    }

    fn halted(&self) -> bool {
        matches!(self.status, NodeStatus::Halted(_))
    }

    /// Begin operating. A joining or restarted node asks peers for state.
    pub fn start(&mut self, now: u64) -> Outbound {
        self.now = now;
        if !self.join {
            return Vec::new();
        }
        self.next_announce = now + self.announce_interval();
        let out = self.replica.announce_join(now);
        let mut sink = Vec::new();
        self.process_replica(out, &mut sink, &mut VecDeque::new());
        self.flush(sink)
    }

    /// Route a received envelope.
    pub fn handle(&mut self, env: SignedEnvelope, now: u64) -> Outbound {
        self.now = now;
        let mut sink = Vec::new();
        let mut local = VecDeque::from([env]);
        while let Some(env) = local.pop_front() {
            if self.halted() {
                break;
            }
            self.dispatch(env, &mut sink, &mut local);
        }
        sink
    }

    fn dispatch(&mut self, env: SignedEnvelope, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        match env.kind.channel() {
            Channel::Block => {
                if !env.verify(&self.directory) {
                    return;
                }
                let Some(msg) = BlockMessage::decode(env.kind, &env.body) else { return };
                let ev = self.blocks.handle(env.sender, msg, self.now);
                self.send_block_messages(ev.outbound, sink);
                self.after_sync_progress(sink, local);
            }
            Channel::Consensus if env.kind == MessageKind::Reply => {
                let env = if env.sender == self.id && std::mem::take(&mut self.corrupt_next_local_reply) {
                    self.corrupt_reply(env)
                } else {
                    env
                };
                let membership = self.replica.membership().clone();
                if let Some(outcome) = self.client.on_reply(&env, &membership, &self.directory) {
                    self.on_submission_outcome(outcome, sink, local);
                }
            }
            Channel::Consensus => {
                let mut app = App {
                    engine: &mut self.engine,
                    blocks: &mut self.blocks,
                    effects: Vec::new(),
                    applied: Vec::new(),
                    failure: None,
                };
                let out = self.replica.handle(env, self.now, &mut app);
                let App { effects, applied, failure, .. } = app;
                self.after_execution(effects, applied, failure, sink, local);
                self.process_replica(out, sink, local);
            }
            Channel::Control => {}
        }
    }

    fn corrupt_reply(&self, env: SignedEnvelope) -> SignedEnvelope {
        let Ok(mut reply) = codec::decode::<Reply>(&env.body) else { return env };
        reply.result.pending_queue_hash = Digest::of(&reply.result.pending_queue_hash);
        SignedEnvelope::sign(&self.keys, self.id, MessageKind::Reply, codec::encode(&reply))
    }

    fn send_block_messages(&self, msgs: Vec<(NodeId, BlockMessage)>, sink: &mut Outbound) {
        for (to, msg) in msgs {
            let env = SignedEnvelope::sign(&self.keys, self.id, msg.kind(), msg.encode());
            sink.push((to, env));
        }
    }

    fn after_execution(
        &mut self,
        effects: Vec<EngineEffect>,
        applied: Vec<Block>,
        failure: Option<String>,
        sink: &mut Outbound,
        local: &mut VecDeque<SignedEnvelope>,
    ) {
        for b in &applied {
            self.events.push(NodeEvent::BlockApplied { number: b.number, hash: b.hash, transactions: b.transactions.len() });
        }
        self.apply_effects(effects, sink, local);
        if let Some(reason) = failure {
            self.halt(reason);
        }
    }

    fn apply_effects(&mut self, effects: Vec<EngineEffect>, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        for e in effects {
            match e {
                EngineEffect::WorkItemAdded(id) => {
                    if let Some(w) = self.engine.work_item(id) {
                        self.events.push(NodeEvent::WorkItemAdded(w.clone()));
                    }
                }
                EngineEffect::WorkItemWithdrawn(id) => self.events.push(NodeEvent::WorkItemWithdrawn(id)),
                EngineEffect::WorkItemCompleted(id) => self.events.push(NodeEvent::WorkItemCompleted(id)),
                EngineEffect::CaseLaunched(id)
                | EngineEffect::CaseUpdated(id)
                | EngineEffect::CaseFinished(id)
                | EngineEffect::CaseDeadlocked(id) => {
                    if let Some(c) = self.engine.case(&id) {
                        let c = c.clone();
                        if self.events.last() != Some(&NodeEvent::CaseUpdated(c.clone())) {
                            self.events.push(NodeEvent::CaseUpdated(c));
                        }
                    }
                }
                EngineEffect::ModelInstalled(_) => {}
                EngineEffect::AutoCompleted { tx, .. } => {
                    let out = self.submit_operation(Operation::AddTransaction(tx));
                    self.route(out, sink, local);
                }
                EngineEffect::ExternalCallFailed { work_item, error } => {
                    self.events.push(NodeEvent::ExternalCallFailed { work_item, error: error.to_string() });
                }
            }
        }
    }

    fn route(&self, out: Outbound, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        for (to, env) in out {
            if to == self.id {
                local.push_back(env);
            } else {
                sink.push((to, env));
            }
        }
    }

    /// Deliver self-addressed messages immediately and return the rest.
    fn flush(&mut self, out: Outbound) -> Outbound {
        let mut sink = Vec::new();
        let mut local = VecDeque::new();
        self.route(out, &mut sink, &mut local);
        while let Some(env) = local.pop_front() {
            if self.halted() {
                break;
            }
            self.dispatch(env, &mut sink, &mut local);
        }
        sink
    }

    fn process_replica(&mut self, out: crate::ordering::Output, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        self.route(out.messages, sink, local);
        for ev in out.events {
            match ev {
                ReplicaEvent::Executed { seq, request, result } => {
                    let request = request.as_ref().map_or(Digest::ZERO, Digest::of);
                    self.events.push(NodeEvent::Ordered { seq, request });
                    if result.block_number.is_some() || matches!(result.outcome, Outcome::Accepted) {
                        self.events.push(NodeEvent::PendingTxChanged { pending: self.pending_queue_len() });
                    }
                }
                ReplicaEvent::ViewInstalled(v) => self.events.push(NodeEvent::ViewChanged(v)),
                ReplicaEvent::MembershipChanged(m) => self.events.push(NodeEvent::MembershipChanged(m.members().to_vec())),
                ReplicaEvent::Equivocation { leader, view, seq } => {
                    tracing::warn!(node = %self.id, %leader, view, seq, "leader equivocated");
                }
                ReplicaEvent::JoinRequested(node) => self.admit(node, sink, local),
                ReplicaEvent::SnapshotDigestMismatch { donor } => {
                    tracing::warn!(node = %self.id, %donor, "snapshot digest mismatch, trying another donor");
                }
                ReplicaEvent::StateInstalled { block_number, block_hash, seq } => {
                    tracing::info!(node = %self.id, seq, block_number, "ordering state installed, catching up on blocks");
                    self.set_status(NodeStatus::Recovering);
                    self.catch_up = Some((block_number, block_hash));
                    if self.blocks.head_number() < block_number {
                        self.start_sync(block_number, block_hash, sink);
                    }
                    self.after_sync_progress(sink, local);
                }
            }
        }
    }

    /// Submit the membership change for a joiner. Every member that hears
    /// the announcement does this; the first one ordered wins and the rest
    /// are refused as duplicates.
    fn admit(&mut self, node: NodeId, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        if self.status != NodeStatus::Running {
            return;
        }
        let now = self.now;
        if self.admitting.get(&node).is_some_and(|at| now < at + self.announce_interval()) {
            return;
        }
        self.admitting.insert(node, now);
        tracing::info!(node = %self.id, joiner = %node, "submitting membership change for joiner");
        let out = self.submit_operation(Operation::AddMember { node });
        self.route(out, sink, local);
    }

    /// Throw away the replica and the engine and fetch both again from
    /// peers. Stored blocks are kept; the sync replaces any that conflict.
    fn rejoin(&mut self, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        self.rejoins += 1;
        let mut rc = self.replica_config.clone();
        rc.initial_membership = self.replica.membership().clone();
        self.replica = Replica::new(rc, self.keys.clone(), self.directory.clone());
        self.engine = Engine::with_nonce_seed(
            self.id,
            self.keys.clone(),
            self.directory.clone(),
            self.registry.clone(),
            self.seed ^ (self.rejoins << 48),
        );
        self.catch_up = None;
        self.join = true;
        self.set_status(NodeStatus::Recovering);
        let out = self.replica.announce_join(self.now);
        self.process_replica(out, sink, local);
    }

    fn start_sync(&mut self, number: u64, hash: Digest, sink: &mut Outbound) {
        let peers: Vec<NodeId> = self.replica.membership().members().iter().copied().filter(|m| *m != self.id).collect();
        self.sync_round += 1;
        let seed = self.seed ^ (self.sync_round << 32);
        let out = self.blocks.start_sync(number, Some(hash), peers, seed, self.now);
        self.send_block_messages(out, sink);
    }

    /// Finish recovery once the chain reaches the installed state's head.
    fn after_sync_progress(&mut self, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        let Some((number, hash)) = self.catch_up else { return };
        match self.blocks.sync_status() {
            Some(SyncStatus::Diverged) => {
                self.halt(format!("peers' chain at block {number} does not match the attested state"));
                return;
            }
            Some(SyncStatus::Stalled) => {
                tracing::warn!(node = %self.id, target = number, "block sync stalled, retrying");
                self.start_sync(number, hash, sink);
                return;
            }
            _ => {}
        }
        if self.blocks.head_number() < number {
            return;
        }
        if self.blocks.store().get(number).map(|b| b.hash) != Some(hash) {
            tracing::warn!(node = %self.id, number, "local chain conflicts with the attested head, refetching it");
            if let Err(e) = self.blocks.store_mut().discard_from(1) {
                self.halt(format!("cannot discard conflicting blocks: {e}"));
                return;
            }
            self.start_sync(number, hash, sink);
            return;
        }
        let verification = self.blocks.store().verify_chain_backward(&hash);
        if let Some(f) = verification.failure {
            self.halt(format!("chain verification failed at block {}: {:?}", f.at, f.kind));
            return;
        }
        self.catch_up = None;
        let from = self.engine.last_applied_block().map_or(1, |n| n + 1);
        let blocks: Vec<Block> = (from..=number).filter_map(|n| self.blocks.store().get(n).cloned()).collect();
        let effects = self.engine.materialize(blocks.iter());
        for b in &blocks {
            self.events.push(NodeEvent::BlockApplied { number: b.number, hash: b.hash, transactions: b.transactions.len() });
        }
        self.set_status(NodeStatus::Running);
        let mut app = App {
            engine: &mut self.engine,
            blocks: &mut self.blocks,
            effects: Vec::new(),
            applied: Vec::new(),
            failure: None,
        };
        let out = self.replica.resume(self.now, &mut app);
        let App { effects: more, applied, failure, .. } = app;
        self.apply_effects(effects, sink, local);
        self.after_execution(more, applied, failure, sink, local);
        self.process_replica(out, sink, local);
    }

    pub fn tick(&mut self, now: u64) -> Outbound {
        self.now = now;
        if self.halted() {
            return Vec::new();
        }
        let mut sink = Vec::new();
        let mut local = VecDeque::new();
        let mut app = App {
            engine: &mut self.engine,
            blocks: &mut self.blocks,
            effects: Vec::new(),
            applied: Vec::new(),
            failure: None,
        };
        let out = self.replica.tick(now, &mut app);
        let App { effects, applied, failure, .. } = app;
        self.after_execution(effects, applied, failure, &mut sink, &mut local);
        self.process_replica(out, &mut sink, &mut local);
        let membership = self.replica.membership().clone();
        let resend = self.client.tick(now, &membership);
        self.route(resend, &mut sink, &mut local);
        if self.join && self.status == NodeStatus::Running && !self.replica.is_member() && now >= self.next_announce {
            self.next_announce = now + self.announce_interval();
            let out = self.replica.reannounce_join();
            self.route(out, &mut sink, &mut local);
        }
        let block_out = self.blocks.tick(now);
        self.send_block_messages(block_out, &mut sink);
        self.after_sync_progress(&mut sink, &mut local);
        while let Some(env) = local.pop_front() {
            if self.halted() {
                break;
            }
            self.dispatch(env, &mut sink, &mut local);
        }
        sink
    }

    fn on_submission_outcome(&mut self, outcome: SubmissionOutcome, sink: &mut Outbound, local: &mut VecDeque<SignedEnvelope>) {
        match outcome {
            SubmissionOutcome::Decided { timestamp_ms, tx_id, result, replies } => {
                if replies.get(&self.id).is_some_and(|mine| *mine != result) {
                    tracing::error!(node = %self.id, timestamp_ms, "local replica disagrees with the decided result, rejoining");
                    self.events.push(NodeEvent::SelfCheckFailed { timestamp_ms });
                    self.rejoin(sink, local);
                }
                let Some(tx_id) = tx_id else { return };
                let reason = match result.outcome {
                    Outcome::Rejected(r) => Some(r),
                    _ => None,
                };
                if reason.is_some() {
                    self.engine.release_submission(&tx_id);
                }
                self.events.push(NodeEvent::TransactionDecided { tx_id, accepted: reason.is_none(), reason });
            }
            SubmissionOutcome::Divergent { timestamp_ms, tx_id, .. } => {
                tracing::error!(node = %self.id, timestamp_ms, "replica replies diverged, checking local chain");
                if let Some(f) = self.blocks.store().verify().failure {
                    self.halt(format!("local chain damaged at block {}: {:?}", f.at, f.kind));
                    return;
                }
                if let Some(tx_id) = tx_id {
                    self.engine.release_submission(&tx_id);
                }
                self.events.push(NodeEvent::Divergence { timestamp_ms, tx_id });
            }
        }
    }

    /// Id of the most recent transaction this node submitted for ordering.
    pub fn last_submission(&self) -> Option<Digest> {
        self.last_submission
    }

    fn submit_operation(&mut self, op: Operation) -> Outbound {
        if let Operation::AddTransaction(tx) = &op {
            self.last_submission = Some(tx.id());
        }
        let membership = self.replica.membership().clone();
        let (_, out) = self.client.submit(op, self.now, &membership);
        out
    }

    fn ensure_live(&self) -> Result<(), NodeError> {
        match &self.status {
            NodeStatus::Running => Ok(()),
            NodeStatus::Recovering => Err(NodeError::Recovering),
            NodeStatus::Halted(r) => Err(NodeError::Halted(r.clone())),
        }
    }

    /// Submit a workflow transaction for ordering.
    pub fn submit_transaction(&mut self, tx: Transaction, now: u64) -> Result<Outbound, NodeError> {
        self.ensure_live()?;
        self.now = now;
        let out = self.submit_operation(Operation::AddTransaction(tx));
        Ok(self.flush(out))
    }

    pub fn install_model(&mut self, model: WorkflowModel, now: u64) -> Result<Outbound, NodeError> {
        self.ensure_live()?;
        if self.engine.model(&model.model_id).is_some() {
            return Err(NodeError::DuplicateModel(model.model_id));
        }
        let tx = self.engine.install_model(model)?;
        self.submit_transaction(tx, now)
    }

    pub fn launch_case(&mut self, model_id: &str, data: DataMap, now: u64) -> Result<(CaseId, Outbound), NodeError> {
        self.ensure_live()?;
        let tx = self.engine.launch_case(model_id, data)?;
        let id = tx.instance().expect("launch produces a case snapshot").case_id;
        Ok((id, self.submit_transaction(tx, now)?))
    }

    pub fn complete_work_item(&mut self, id: WorkItemId, outputs: DataMap, now: u64) -> Result<(Digest, Outbound), NodeError> {
        self.ensure_live()?;
        let tx = self.engine.complete_work_item(id, outputs)?;
        let tx_id = tx.id();
        Ok((tx_id, self.submit_transaction(tx, now)?))
    }

    /// Propose a new membership.
    pub fn reconfigure(&mut self, members: Vec<NodeId>, f: usize, now: u64) -> Result<Outbound, NodeError> {
        self.ensure_live()?;
        self.now = now;
        let out = self.submit_operation(Operation::Reconfigure { members, f });
        Ok(self.flush(out))
    }
}
