//! A sans-IO ordering replica.
//!
//! The replica consumes verified envelopes and clock ticks and returns the
//! envelopes to send. Execution calls back into an [`OrderingApp`].

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::sync::Arc;

use serde::Serialize;

use super::messages::{
    open, open_request, request_digest, CheckpointMsg, CommittedEntry, NewView, PrePrepare, PreparedCert,
    ProtocolMessage, Reply, StateReply, StateRequest, ViewChange, Vote,
};
use super::types::{
    ClientRequest, ExecutionResult, Membership, OrderingApp, Outcome, ReplicatedState, RequestStatus,
    Seq, View, NULL_DIGEST,
};
use crate::codec;
use crate::crypto::{Digest, KeyDirectory, KeyPair, NodeId};
use crate::transport::{MessageKind, SignedEnvelope};

#[derive(Clone, Debug)]
pub struct ReplicaConfig {
    pub id: NodeId,
    /// Membership assumed before any replicated state is known.
    pub initial_membership: Membership,
    pub block_size: usize,
    pub checkpoint_interval: u64,
    /// How far past the stable checkpoint sequence numbers may run.
    pub window: u64,
    /// A waiting request is forwarded to the leader after this long and the
    /// leader is suspected after twice this long.
    pub request_timeout_ms: u64,
    pub view_change_timeout_ms: u64,
}

impl ReplicaConfig {
    pub fn new(id: NodeId, initial_membership: Membership, block_size: usize) -> Self {
        ReplicaConfig {
            id,
            initial_membership,
            block_size,
            checkpoint_interval: 64,
            window: 128,
            request_timeout_ms: 500,
            view_change_timeout_ms: 1_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Normal,
    ViewChange { target: View, deadline: u64 },
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum ReplicaEvent {
    Executed { seq: Seq, request: Option<ClientRequest>, result: ExecutionResult },
    ViewInstalled(View),
    MembershipChanged(Membership),
    Equivocation { leader: NodeId, view: View, seq: Seq },
    /// Replicated state is current as of `seq`; execution stays paused until
    /// [`Replica::resume`] so the application can catch up to the block.
    StateInstalled { seq: Seq, block_number: u64, block_hash: Digest },
    SnapshotDigestMismatch { donor: NodeId },
    /// A known non-member asked to be admitted.
    JoinRequested(NodeId),
}

#[derive(Debug, Default)]
pub struct Output {
    pub messages: Vec<(NodeId, SignedEnvelope)>,
    pub events: Vec<ReplicaEvent>,
}

impl Output {
    pub fn merge(&mut self, other: Output) {
        self.messages.extend(other.messages);
        self.events.extend(other.events);
    }
}

#[derive(Debug, Default)]
struct Slot {
    pre_prepares: BTreeMap<View, (Digest, SignedEnvelope)>,
    prepares: BTreeMap<View, BTreeMap<NodeId, (Digest, SignedEnvelope)>>,
    commits: BTreeMap<View, BTreeMap<NodeId, (Digest, SignedEnvelope)>>,
    sent_commit: BTreeSet<View>,
    /// Request body learned from a certificate or at execution.
    request: Option<SignedEnvelope>,
}

#[derive(Debug, Clone)]
struct Stable {
    seq: Seq,
    digest: Digest,
    proof: Vec<SignedEnvelope>,
}

#[derive(Debug, Clone, Copy)]
struct Waiting {
    since: u64,
    forwarded: bool,
}

#[derive(Debug)]
struct Recovery {
    donors: Vec<NodeId>,
    next: usize,
    deadline: u64,
}

pub struct Replica {
    cfg: ReplicaConfig,
    keys: KeyPair,
    directory: Arc<KeyDirectory>,
    view: View,
    mode: Mode,
    state: ReplicatedState,
    log: BTreeMap<Seq, Slot>,
    requests: HashMap<Digest, (SignedEnvelope, ClientRequest)>,
    waiting: HashMap<Digest, Waiting>,
    queue: VecDeque<Digest>,
    proposed: BTreeSet<Digest>,
    next_seq: Seq,
    checkpoints: BTreeMap<Seq, BTreeMap<NodeId, (Digest, SignedEnvelope)>>,
    snapshots: BTreeMap<Seq, ReplicatedState>,
    stable: Stable,
    view_changes: BTreeMap<View, BTreeMap<NodeId, (ViewChange, SignedEnvelope)>>,
    vc_timeout: u64,
    /// Highest (view, seq) of a reconfiguration proposed but not executed.
    barrier: Option<(View, Seq)>,
    paused: bool,
    recovery: Option<Recovery>,
    /// When proof of a checkpoint beyond our execution was first seen.
    behind_since: Option<u64>,
    /// Request envelopes whose signature already checked out. A request is
    /// seen on receipt, inside the pre-prepare and again at execution.
    verified: HashSet<(Digest, [u8; 64])>,
    verified_order: VecDeque<(Digest, [u8; 64])>,
    now: u64,
    out: Output,
}

const VERIFIED_CACHE: usize = 8_192;

impl std::fmt::Debug for Replica {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Replica")
            .field("id", &self.cfg.id)
            .field("view", &self.view)
            .field("mode", &self.mode)
            .field("last_executed", &self.state.last_executed)
            .field("stable", &self.stable.seq)
            .finish()
    }
}

fn sign<T: Serialize>(keys: &KeyPair, id: NodeId, kind: MessageKind, payload: &T) -> SignedEnvelope {
    SignedEnvelope::sign(keys, id, kind, codec::encode(payload))
}

impl Replica {
    pub fn new(cfg: ReplicaConfig, keys: KeyPair, directory: Arc<KeyDirectory>) -> Self {
        let state = ReplicatedState::genesis(cfg.initial_membership.clone(), cfg.block_size);
        let digest = state.digest();
        let vc_timeout = cfg.view_change_timeout_ms;
        Replica {
            keys,
            directory,
            view: 0,
            mode: Mode::Normal,
            log: BTreeMap::new(),
            requests: HashMap::new(),
            waiting: HashMap::new(),
            queue: VecDeque::new(),
            proposed: BTreeSet::new(),
            next_seq: 1,
            checkpoints: BTreeMap::new(),
            snapshots: BTreeMap::from([(0, state.clone())]),
            stable: Stable { seq: 0, digest, proof: Vec::new() },
            view_changes: BTreeMap::new(),
            vc_timeout,
            barrier: None,
            paused: false,
            recovery: None,
            behind_since: None,
            verified: HashSet::new(),
            verified_order: VecDeque::new(),
            now: 0,
            out: Output::default(),
            state,
            cfg,
        }
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn state(&self) -> &ReplicatedState {
        &self.state
    }

    pub fn membership(&self) -> &Membership {
        &self.state.membership
    }

    pub fn is_member(&self) -> bool {
        self.state.membership.contains(self.cfg.id)
    }

    pub fn leader(&self) -> NodeId {
        self.state.membership.leader(self.view)
    }

    pub fn is_leader(&self) -> bool {
        self.leader() == self.cfg.id
    }

    pub fn last_executed(&self) -> Seq {
        self.state.last_executed
    }

    pub fn stable_checkpoint(&self) -> (Seq, Digest) {
        (self.stable.seq, self.stable.digest)
    }

    pub fn is_recovering(&self) -> bool {
        self.recovery.is_some()
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    fn quorum(&self) -> usize {
        self.state.membership.quorum()
    }

    fn send(&mut self, to: NodeId, env: SignedEnvelope) {
        self.out.messages.push((to, env));
    }

    fn broadcast(&mut self, env: &SignedEnvelope) {
        let me = self.cfg.id;
        let targets: Vec<NodeId> = self.state.membership.members().iter().copied().filter(|m| *m != me).collect();
        for t in targets {
            self.send(t, env.clone());
        }
    }

    fn sign<T: Serialize>(&self, kind: MessageKind, payload: &T) -> SignedEnvelope {
        sign(&self.keys, self.cfg.id, kind, payload)
    }

    fn open_request(&mut self, env: &SignedEnvelope) -> Option<ClientRequest> {
        let key = (request_digest(env), env.signature.0);
        if env.kind == MessageKind::Request && self.verified.contains(&key) {
            let req: ClientRequest = codec::decode(&env.body).ok()?;
            return (req.client == env.sender).then_some(req);
        }
        let req = open_request(env, &self.directory)?;
        if self.verified_order.len() >= VERIFIED_CACHE {
            if let Some(old) = self.verified_order.pop_front() {
                self.verified.remove(&old);
            }
        }
        self.verified.insert(key);
        self.verified_order.push_back(key);
        Some(req)
    }

    fn in_window(&self, seq: Seq) -> bool {
        seq > self.stable.seq && seq <= self.stable.seq + self.cfg.window
    }

    fn finish(&mut self, app: &mut dyn OrderingApp) -> Output {
        self.try_execute(app);
        self.propose();
        std::mem::take(&mut self.out)
    }

    /// Process one envelope received from the network.
    pub fn handle(&mut self, env: SignedEnvelope, now: u64, app: &mut dyn OrderingApp) -> Output {
        self.now = now;
        let authentic = match env.kind {
            MessageKind::Request => self.open_request(&env).is_some(),
            _ => env.verify(&self.directory),
        };
        if !authentic {
            tracing::debug!(sender = %env.sender, kind = ?env.kind, "dropping envelope with bad signature");
            return Output::default();
        }
        let Some(msg) = ProtocolMessage::from_envelope(&env) else {
            return Output::default();
        };
        match msg {
            ProtocolMessage::Request(req) => self.on_request(env, req),
            ProtocolMessage::PrePrepare(pp) => self.on_pre_prepare(env, pp),
            ProtocolMessage::Prepare(v) => self.on_prepare(env, v),
            ProtocolMessage::Commit(v) => self.on_commit(env, v),
            ProtocolMessage::Checkpoint(c) => self.on_checkpoint(env, c),
            ProtocolMessage::ViewChange(vc) => self.on_view_change(env, vc),
            ProtocolMessage::NewView(nv) => self.on_new_view(env, nv),
            ProtocolMessage::StateRequest(r) => self.on_state_request(env.sender, r),
            ProtocolMessage::Join(_) => {
                tracing::info!(node = %env.sender, "peer announced join");
                if self.is_member() && !self.state.membership.contains(env.sender) {
                    self.out.events.push(ReplicaEvent::JoinRequested(env.sender));
                }
            }
            ProtocolMessage::StateReply(r) => self.on_state_reply(env.sender, r),
            ProtocolMessage::Reply(_) => {}
        }
        self.finish(app)
    }

    /// Advance timers.
    pub fn tick(&mut self, now: u64, app: &mut dyn OrderingApp) -> Output {
        self.now = now;
        if let Some(r) = &self.recovery {
            if now >= r.deadline {
                self.ask_next_donor();
            }
        }
        if let Some(since) = self.behind_since {
            if self.recovery.is_none() && now >= since + self.cfg.request_timeout_ms {
                tracing::info!(replica = %self.cfg.id, "lagging behind a proven checkpoint, fetching state");
                self.behind_since = None;
                self.start_recovery(false);
            }
        }
        match self.mode {
            Mode::ViewChange { target, deadline } if now >= deadline => {
                self.vc_timeout = self.vc_timeout.saturating_mul(2);
                self.start_view_change(target + 1);
            }
            Mode::Normal if self.is_member() && !self.is_leader() && !self.paused && self.recovery.is_none() => {
                let t = self.cfg.request_timeout_ms;
                let mut suspect = false;
                let mut forward = Vec::new();
                for (d, w) in self.waiting.iter_mut() {
                    if now >= w.since + 2 * t {
                        suspect = true;
                    } else if now >= w.since + t && !w.forwarded {
                        w.forwarded = true;
                        forward.push(*d);
                    }
                }
                if suspect {
                    tracing::info!(replica = %self.cfg.id, view = self.view, "request timed out, suspecting leader");
                    self.start_view_change(self.view + 1);
                } else {
                    let leader = self.leader();
                    for d in forward {
                        if let Some((env, _)) = self.requests.get(&d) {
                            let env = env.clone();
                            self.send(leader, env);
                        }
                    }
                }
            }
            _ => {}
        }
        self.finish(app)
    }

    /// Let execution proceed after the application caught up with an
    /// installed state.
    pub fn resume(&mut self, now: u64, app: &mut dyn OrderingApp) -> Output {
        self.now = now;
        self.paused = false;
        let now = self.now;
        for w in self.waiting.values_mut() {
            w.since = now;
        }
        self.finish(app)
    }

    /// Ask peers for the current state, e.g. after a restart or when joining.
    pub fn announce_join(&mut self, now: u64) -> Output {
        self.now = now;
        let join = self.sign(MessageKind::Join, &StateRequest { have: self.state.last_executed });
        self.broadcast(&join);
        self.start_recovery(true);
        std::mem::take(&mut self.out)
    }

    /// Repeat the join announcement without restarting state transfer, for
    /// an observer still waiting to be admitted.
    pub fn reannounce_join(&mut self) -> Vec<(NodeId, SignedEnvelope)> {
        let join = self.sign(MessageKind::Join, &StateRequest { have: self.state.last_executed });
        self.broadcast(&join);
        std::mem::take(&mut self.out.messages)
    }

    fn start_recovery(&mut self, pause: bool) {
        let me = self.cfg.id;
        let mut donors: Vec<NodeId> = self.state.membership.members().iter().copied().filter(|m| *m != me).collect();
        // Spread load: start with the member after us.
        let start = donors.iter().position(|d| *d > me).unwrap_or(0);
        donors.rotate_left(start);
        if donors.is_empty() {
            return;
        }
        self.paused |= pause;
        self.recovery = Some(Recovery { donors, next: 0, deadline: 0 });
        self.ask_next_donor();
    }

    fn ask_next_donor(&mut self) {
        let Some(r) = &mut self.recovery else { return };
        let donor = r.donors[r.next % r.donors.len()];
        r.next += 1;
        r.deadline = self.now + 2 * self.cfg.request_timeout_ms;
        let req = self.sign(MessageKind::StateRequest, &StateRequest { have: self.state.last_executed });
        self.send(donor, req);
    }

    // ---- normal case ----

    fn on_request(&mut self, env: SignedEnvelope, _: ClientRequest) {
        let Some(req) = self.open_request(&env) else { return };
        if !self.is_member() {
            return;
        }
        match self.state.request_status(req.client, req.timestamp_ms) {
            RequestStatus::Executed(result) => {
                let reply = self.sign(
                    MessageKind::Reply,
                    &Reply { view: self.view, timestamp_ms: req.timestamp_ms, client: req.client, result },
                );
                self.send(req.client, reply);
            }
            RequestStatus::Stale => {}
            RequestStatus::New => {
                let d = request_digest(&env);
                let now = self.now;
                self.waiting.entry(d).or_insert(Waiting { since: now, forwarded: false });
                self.requests.entry(d).or_insert((env, req));
                if self.is_leader() && !self.proposed.contains(&d) && !self.queue.contains(&d) {
                    self.queue.push_back(d);
                }
            }
        }
    }

    fn propose(&mut self) {
        if !self.is_leader() || self.mode != Mode::Normal || !self.is_member() {
            return;
        }
        while let Some(&d) = self.queue.front() {
            if self.barrier.is_some_and(|(v, _)| v == self.view) {
                break;
            }
            if !self.in_window(self.next_seq) {
                break;
            }
            self.queue.pop_front();
            let Some((env, req)) = self.requests.get(&d).cloned() else { continue };
            if self.proposed.contains(&d) || self.state.request_status(req.client, req.timestamp_ms) != RequestStatus::New {
                continue;
            }
            let seq = self.next_seq;
            self.next_seq += 1;
            self.proposed.insert(d);
            let pp = PrePrepare { view: self.view, seq, digest: d, request: Some(env) };
            let pp_env = self.sign(MessageKind::PrePrepare, &pp);
            self.log.entry(seq).or_default().pre_prepares.insert(self.view, (d, pp_env.clone()));
            self.broadcast(&pp_env);
            if req.operation.is_reconfiguration() {
                self.barrier = Some((self.view, seq));
            }
            // A lone member is its own quorum.
            self.check_prepared(seq, self.view);
        }
    }

    fn on_pre_prepare(&mut self, env: SignedEnvelope, pp: PrePrepare) {
        if pp.view != self.view || self.mode != Mode::Normal || !self.is_member() {
            return;
        }
        if env.sender != self.state.membership.leader(pp.view) || env.sender == self.cfg.id {
            return;
        }
        if !self.in_window(pp.seq) || !pp.is_consistent() {
            return;
        }
        if let Some((bv, bs)) = self.barrier {
            if bv == pp.view && pp.seq > bs {
                return;
            }
        }
        let req = match &pp.request {
            Some(r) => match self.open_request(r) {
                Some(req) => Some(req),
                None => return,
            },
            None => None,
        };
        let slot = self.log.entry(pp.seq).or_default();
        if let Some((existing, _)) = slot.pre_prepares.get(&pp.view) {
            if *existing != pp.digest {
                tracing::warn!(leader = %env.sender, view = pp.view, seq = pp.seq, "conflicting pre-prepares from leader");
                self.out.events.push(ReplicaEvent::Equivocation { leader: env.sender, view: pp.view, seq: pp.seq });
                self.start_view_change(self.view + 1);
            }
            return;
        }
        slot.pre_prepares.insert(pp.view, (pp.digest, env));
        if let (Some(r), Some(req)) = (pp.request, req) {
            if req.operation.is_reconfiguration() {
                self.barrier = Some((pp.view, pp.seq));
            }
            if self.state.request_status(req.client, req.timestamp_ms) == RequestStatus::New {
                let now = self.now;
                self.waiting.entry(pp.digest).or_insert(Waiting { since: now, forwarded: false });
                self.requests.entry(pp.digest).or_insert((r, req));
            }
        }
        let vote = Vote { view: pp.view, seq: pp.seq, digest: pp.digest };
        let prepare = self.sign(MessageKind::Prepare, &vote);
        self.log.get_mut(&pp.seq).unwrap().prepares.entry(pp.view).or_default().insert(self.cfg.id, (pp.digest, prepare.clone()));
        self.broadcast(&prepare);
        self.check_prepared(pp.seq, pp.view);
    }

    fn on_prepare(&mut self, env: SignedEnvelope, v: Vote) {
        if v.view < self.view || !self.state.membership.contains(env.sender) || !self.in_window(v.seq) {
            return;
        }
        if env.sender == self.state.membership.leader(v.view) {
            return;
        }
        let slot = self.log.entry(v.seq).or_default();
        slot.prepares.entry(v.view).or_default().entry(env.sender).or_insert((v.digest, env));
        if v.view == self.view {
            self.check_prepared(v.seq, v.view);
        }
    }

    /// Whether (view, seq) is prepared: a pre-prepare plus matching prepares
    /// from quorum - 1 distinct backups.
    fn prepared_digest(&self, seq: Seq, view: View) -> Option<Digest> {
        let slot = self.log.get(&seq)?;
        let (d, _) = slot.pre_prepares.get(&view)?;
        let leader = self.state.membership.leader(view);
        let votes = slot.prepares.get(&view).map_or(0, |p| {
            p.iter().filter(|(n, (pd, _))| **n != leader && pd == d && self.state.membership.contains(**n)).count()
        });
        (votes + 1 >= self.quorum()).then_some(*d)
    }

    fn check_prepared(&mut self, seq: Seq, view: View) {
        if view != self.view || self.mode != Mode::Normal {
            return;
        }
        let Some(d) = self.prepared_digest(seq, view) else { return };
        let slot = self.log.get_mut(&seq).unwrap();
        if !slot.sent_commit.insert(view) {
            return;
        }
        let commit = self.sign(MessageKind::Commit, &Vote { view, seq, digest: d });
        self.log
            .get_mut(&seq)
            .unwrap()
            .commits
            .entry(view)
            .or_default()
            .insert(self.cfg.id, (d, commit.clone()));
        self.broadcast(&commit);
    }

    fn on_commit(&mut self, env: SignedEnvelope, v: Vote) {
        if !self.state.membership.contains(env.sender) || v.seq <= self.state.last_executed || !self.in_window(v.seq) {
            return;
        }
        let slot = self.log.entry(v.seq).or_default();
        slot.commits.entry(v.view).or_default().entry(env.sender).or_insert((v.digest, env));
    }

    /// The digest committed at `seq`, if quorum COMMITs in one view agree.
    fn committed(&self, seq: Seq) -> Option<(View, Digest)> {
        let slot = self.log.get(&seq)?;
        let q = self.quorum();
        for (view, votes) in slot.commits.iter().rev() {
            let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
            for (n, (d, _)) in votes {
                if self.state.membership.contains(*n) {
                    *tally.entry(*d).or_default() += 1;
                }
            }
            if let Some((d, _)) = tally.into_iter().find(|(_, c)| *c >= q) {
                return Some((*view, d));
            }
        }
        None
    }

    fn request_body(&self, seq: Seq, d: Digest) -> Option<SignedEnvelope> {
        if let Some((env, _)) = self.requests.get(&d) {
            return Some(env.clone());
        }
        let slot = self.log.get(&seq)?;
        if let Some(r) = slot.request.as_ref().filter(|r| request_digest(r) == d) {
            return Some(r.clone());
        }
        slot.pre_prepares.values().find_map(|(pd, env)| {
            if *pd != d {
                return None;
            }
            let pp: PrePrepare = codec::decode(&env.body).ok()?;
            pp.request
        })
    }

    fn try_execute(&mut self, app: &mut dyn OrderingApp) {
        if self.paused {
            return;
        }
        loop {
            let seq = self.state.last_executed + 1;
            let Some((_, d)) = self.committed(seq) else { break };
            let (env, req) = if d == NULL_DIGEST {
                (None, None)
            } else {
                let Some(env) = self.request_body(seq, d) else { break };
                let Some(req) = self.open_request(&env) else { break };
                (Some(env), Some(req))
            };
            let result = self.state.execute(seq, req.as_ref(), &self.directory, app);
            if let Some(slot) = self.log.get_mut(&seq) {
                slot.request = env;
            }
            self.requests.remove(&d);
            self.waiting.remove(&d);
            let now = self.now;
            for w in self.waiting.values_mut() {
                w.since = now;
                w.forwarded = false;
            }
            if let (Some(req), Some(result)) = (&req, &result) {
                let reply = self.sign(
                    MessageKind::Reply,
                    &Reply { view: self.view, timestamp_ms: req.timestamp_ms, client: req.client, result: result.clone() },
                );
                self.send(req.client, reply);
            }
            let reconfigured = result.as_ref().is_some_and(|r| r.outcome == Outcome::Reconfigured);
            // A refused membership change lifts its barrier in place.
            if self.barrier.is_some_and(|(_, b)| b <= seq) {
                self.barrier = None;
            }
            self.out.events.push(ReplicaEvent::Executed { seq, request: req, result: result.clone().unwrap_or_else(|| self.noop_result(seq)) });
            if reconfigured {
                self.on_reconfigured(seq);
            }
            if seq.is_multiple_of(self.cfg.checkpoint_interval) || reconfigured {
                self.make_checkpoint(seq);
            }
        }
        if self.behind_since.is_some() && self.proven_checkpoint_ahead().is_none() {
            self.behind_since = None;
        }
    }

    fn noop_result(&self, seq: Seq) -> ExecutionResult {
        ExecutionResult {
            seq,
            outcome: Outcome::Accepted,
            block_number: None,
            latest_block_number: self.state.ordering.latest_block_number,
            latest_block_hash: self.state.ordering.latest_block_hash,
            pending_queue_hash: self.state.ordering.pending_hash(),
        }
    }

    fn on_reconfigured(&mut self, seq: Seq) {
        let m = self.state.membership.clone();
        tracing::info!(replica = %self.cfg.id, seq, members = ?m.members(), f = m.f(), "membership changed");
        self.out.events.push(ReplicaEvent::MembershipChanged(m));
        self.log.retain(|s, _| *s <= seq);
        self.barrier = None;
        self.view += 1;
        self.mode = Mode::Normal;
        self.vc_timeout = self.cfg.view_change_timeout_ms;
        self.view_changes.retain(|v, _| *v > self.view);
        self.enter_view_common(seq);
        self.out.events.push(ReplicaEvent::ViewInstalled(self.view));
    }

    /// Reset per-view proposal state after moving to `self.view`.
    fn enter_view_common(&mut self, last_assigned: Seq) {
        self.proposed.clear();
        self.next_seq = last_assigned.max(self.state.last_executed).max(self.stable.seq) + 1;
        let now = self.now;
        for w in self.waiting.values_mut() {
            w.since = now;
            w.forwarded = false;
        }
        self.queue.clear();
        if self.is_leader() {
            let mut pending: Vec<(u64, NodeId, u64, Digest)> = self
                .waiting
                .iter()
                .filter_map(|(d, w)| self.requests.get(d).map(|(_, r)| (w.since, r.client, r.timestamp_ms, *d)))
                .collect();
            pending.sort();
            self.queue.extend(pending.into_iter().map(|(_, _, _, d)| d));
        }
    }

    // ---- checkpoints ----

    fn make_checkpoint(&mut self, seq: Seq) {
        let digest = self.state.digest();
        self.snapshots.insert(seq, self.state.clone());
        let msg = CheckpointMsg { seq, state_digest: digest };
        let env = self.sign(MessageKind::Checkpoint, &msg);
        self.checkpoints.entry(seq).or_default().insert(self.cfg.id, (digest, env.clone()));
        self.broadcast(&env);
        self.check_stable(seq);
    }

    fn on_checkpoint(&mut self, env: SignedEnvelope, c: CheckpointMsg) {
        if c.seq <= self.stable.seq {
            return;
        }
        self.checkpoints.entry(c.seq).or_default().entry(env.sender).or_insert((c.state_digest, env));
        self.check_stable(c.seq);
    }

    fn check_stable(&mut self, seq: Seq) {
        let Some(votes) = self.checkpoints.get(&seq) else { return };
        match self.snapshots.get(&seq) {
            Some(snap) => {
                let digest = snap.digest();
                let q = snap.membership.quorum();
                let proof: Vec<SignedEnvelope> = votes
                    .iter()
                    .filter(|(n, (d, _))| *d == digest && snap.membership.contains(**n))
                    .map(|(_, (_, e))| e.clone())
                    .collect();
                if proof.len() >= q {
                    self.set_stable(Stable { seq, digest, proof });
                }
            }
            None => {
                if seq > self.state.last_executed && self.behind_since.is_none() && self.proven(seq).is_some() {
                    self.behind_since = Some(self.now);
                }
            }
        }
    }

    /// Digest attested by a quorum of the current membership for `seq`.
    fn proven(&self, seq: Seq) -> Option<Digest> {
        let votes = self.checkpoints.get(&seq)?;
        let mut tally: BTreeMap<Digest, usize> = BTreeMap::new();
        for (n, (d, _)) in votes {
            if self.state.membership.contains(*n) {
                *tally.entry(*d).or_default() += 1;
            }
        }
        tally.into_iter().find(|(_, c)| *c >= self.quorum()).map(|(d, _)| d)
    }

    fn proven_checkpoint_ahead(&self) -> Option<Seq> {
        self.checkpoints
            .range(self.state.last_executed + 1..)
            .map(|(s, _)| *s)
            .find(|s| self.proven(*s).is_some())
    }

    fn set_stable(&mut self, stable: Stable) {
        if stable.seq <= self.stable.seq {
            return;
        }
        let s = stable.seq;
        self.stable = stable;
        self.log.retain(|n, _| *n > s);
        self.checkpoints.retain(|n, _| *n > s);
        self.snapshots.retain(|n, _| *n >= s);
    }

    // ---- view change ----

    fn prepared_cert(&self, seq: Seq) -> Option<PreparedCert> {
        let slot = self.log.get(&seq)?;
        for (&view, (d, pp)) in slot.pre_prepares.iter().rev() {
            if self.prepared_digest(seq, view).is_none() {
                continue;
            }
            let leader = self.state.membership.leader(view);
            let prepares = slot.prepares[&view]
                .iter()
                .filter(|(n, (pd, _))| **n != leader && pd == d)
                .map(|(_, (_, e))| e.clone())
                .collect();
            return Some(PreparedCert { pre_prepare: pp.clone(), prepares });
        }
        None
    }

    fn start_view_change(&mut self, target: View) {
        if !self.is_member() {
            return;
        }
        if let Mode::ViewChange { target: t, .. } = self.mode {
            if t >= target {
                return;
            }
        }
        if target <= self.view {
            return;
        }
        self.mode = Mode::ViewChange { target, deadline: self.now + self.vc_timeout };
        let prepared = self.log.keys().copied().filter(|s| *s > self.stable.seq).filter_map(|s| self.prepared_cert(s)).collect();
        let vc = ViewChange {
            new_view: target,
            stable_seq: self.stable.seq,
            stable_digest: self.stable.digest,
            checkpoint_proof: self.stable.proof.clone(),
            prepared,
        };
        tracing::debug!(replica = %self.cfg.id, target, "starting view change");
        let env = self.sign(MessageKind::ViewChange, &vc);
        self.view_changes.entry(target).or_default().insert(self.cfg.id, (vc, env.clone()));
        self.broadcast(&env);
        self.try_new_view(target);
    }

    /// Check a VIEW_CHANGE's embedded evidence.
    fn valid_view_change(&self, vc: &ViewChange) -> bool {
        let m = &self.state.membership;
        if vc.stable_seq > 0 {
            let signers: BTreeSet<NodeId> = vc
                .checkpoint_proof
                .iter()
                .filter(|e| m.contains(e.sender))
                .filter(|e| {
                    open::<CheckpointMsg>(e, MessageKind::Checkpoint, &self.directory)
                        .is_some_and(|c| c.seq == vc.stable_seq && c.state_digest == vc.stable_digest)
                })
                .map(|e| e.sender)
                .collect();
            if signers.len() < m.weak_quorum() {
                return false;
            }
        }
        vc.prepared.iter().all(|cert| self.valid_prepared_cert(cert, vc.stable_seq).is_some())
    }

    fn valid_prepared_cert(&self, cert: &PreparedCert, after: Seq) -> Option<(View, PrePrepare)> {
        let m = &self.state.membership;
        let pp: PrePrepare = open(&cert.pre_prepare, MessageKind::PrePrepare, &self.directory)?;
        if cert.pre_prepare.sender != m.leader(pp.view) || pp.seq <= after || !pp.is_consistent() {
            return None;
        }
        let signers: BTreeSet<NodeId> = cert
            .prepares
            .iter()
            .filter(|e| m.contains(e.sender) && e.sender != cert.pre_prepare.sender)
            .filter(|e| {
                open::<Vote>(e, MessageKind::Prepare, &self.directory)
                    .is_some_and(|v| v.view == pp.view && v.seq == pp.seq && v.digest == pp.digest)
            })
            .map(|e| e.sender)
            .collect();
        (signers.len() + 1 >= m.quorum()).then_some((pp.view, pp))
    }

    fn on_view_change(&mut self, env: SignedEnvelope, vc: ViewChange) {
        if !self.is_member() || !self.state.membership.contains(env.sender) || vc.new_view <= self.view {
            return;
        }
        if !self.valid_view_change(&vc) {
            tracing::warn!(from = %env.sender, "invalid view change ignored");
            return;
        }
        let target = vc.new_view;
        self.view_changes.entry(target).or_default().insert(env.sender, (vc, env));

        // Join once f + 1 replicas want to move past our current target.
        let current = match self.mode {
            Mode::ViewChange { target, .. } => target,
            Mode::Normal => self.view,
        };
        let mut ahead: BTreeMap<NodeId, View> = BTreeMap::new();
        for (v, senders) in self.view_changes.range(current + 1..) {
            for n in senders.keys() {
                ahead.entry(*n).or_insert(*v);
            }
        }
        if ahead.len() >= self.state.membership.weak_quorum() {
            let lowest = *ahead.values().min().unwrap();
            self.start_view_change(lowest);
        }
        self.try_new_view(target);
    }

    fn new_view_plan(&self, vcs: &[&ViewChange]) -> (Seq, BTreeMap<Seq, (Digest, Option<SignedEnvelope>)>) {
        let min_s = vcs.iter().map(|vc| vc.stable_seq).max().unwrap_or(0);
        let mut best: BTreeMap<Seq, (View, Digest, Option<SignedEnvelope>)> = BTreeMap::new();
        for vc in vcs {
            for cert in &vc.prepared {
                let Some((view, pp)) = self.valid_prepared_cert(cert, 0) else { continue };
                if pp.seq <= min_s {
                    continue;
                }
                match best.get(&pp.seq) {
                    Some((v, _, _)) if *v >= view => {}
                    _ => {
                        best.insert(pp.seq, (view, pp.digest, pp.request));
                    }
                }
            }
        }
        let max_s = best.keys().next_back().copied().unwrap_or(min_s);
        let plan = (min_s + 1..=max_s)
            .map(|s| match best.remove(&s) {
                Some((_, d, r)) => (s, (d, r)),
                None => (s, (NULL_DIGEST, None)),
            })
            .collect();
        (min_s, plan)
    }

    fn try_new_view(&mut self, target: View) {
        if self.state.membership.leader(target) != self.cfg.id {
            return;
        }
        if !matches!(self.mode, Mode::ViewChange { target: t, .. } if t == target) {
            return;
        }
        let Some(vcs) = self.view_changes.get(&target) else { return };
        if vcs.len() < self.quorum() {
            return;
        }
        let chosen: Vec<(ViewChange, SignedEnvelope)> = vcs.values().take(self.quorum()).cloned().collect();
        let refs: Vec<&ViewChange> = chosen.iter().map(|(vc, _)| vc).collect();
        let (min_s, plan) = self.new_view_plan(&refs);
        let pre_prepares: Vec<SignedEnvelope> = plan
            .into_iter()
            .map(|(seq, (digest, request))| self.sign(MessageKind::PrePrepare, &PrePrepare { view: target, seq, digest, request }))
            .collect();
        let nv = NewView { view: target, view_changes: chosen.into_iter().map(|(_, e)| e).collect(), pre_prepares };
        let env = self.sign(MessageKind::NewView, &nv);
        self.broadcast(&env);
        tracing::info!(replica = %self.cfg.id, view = target, "sending new view");
        self.install_view(target, min_s, nv.pre_prepares);
    }

    fn on_new_view(&mut self, env: SignedEnvelope, nv: NewView) {
        if !self.is_member() || nv.view < self.view || (nv.view == self.view && self.mode == Mode::Normal) {
            return;
        }
        if env.sender != self.state.membership.leader(nv.view) {
            return;
        }
        let mut seen = BTreeSet::new();
        let mut vcs = Vec::new();
        for e in &nv.view_changes {
            let Some(vc) = open::<ViewChange>(e, MessageKind::ViewChange, &self.directory) else { continue };
            if vc.new_view == nv.view && self.state.membership.contains(e.sender) && seen.insert(e.sender) && self.valid_view_change(&vc) {
                vcs.push(vc);
            }
        }
        if vcs.len() < self.quorum() {
            tracing::warn!(from = %env.sender, "new view without a view-change quorum");
            return;
        }
        let (min_s, plan) = self.new_view_plan(&vcs.iter().collect::<Vec<_>>());
        let mut got = BTreeMap::new();
        for e in &nv.pre_prepares {
            match open::<PrePrepare>(e, MessageKind::PrePrepare, &self.directory) {
                Some(pp) if e.sender == env.sender && pp.view == nv.view && pp.is_consistent() => {
                    got.insert(pp.seq, pp.digest);
                }
                _ => {}
            }
        }
        let expected: BTreeMap<Seq, Digest> = plan.iter().map(|(s, (d, _))| (*s, *d)).collect();
        if got != expected || got.len() != nv.pre_prepares.len() {
            tracing::warn!(from = %env.sender, view = nv.view, "new view proposals do not match view changes");
            self.start_view_change(nv.view + 1);
            return;
        }
        self.install_view(nv.view, min_s, nv.pre_prepares);
    }

    fn install_view(&mut self, view: View, min_s: Seq, pre_prepares: Vec<SignedEnvelope>) {
        self.view = view;
        self.mode = Mode::Normal;
        self.vc_timeout = self.cfg.view_change_timeout_ms;
        self.view_changes.retain(|v, _| *v > view);
        self.barrier = None;
        let leader = self.leader();
        let mut max_s = min_s;
        for env in pre_prepares {
            let Some(pp) = open::<PrePrepare>(&env, MessageKind::PrePrepare, &self.directory) else { continue };
            max_s = max_s.max(pp.seq);
            if pp.seq <= self.stable.seq {
                continue;
            }
            if let Some(r) = &pp.request {
                if let Some(req) = self.open_request(r) {
                    // An executed change has already lifted its barrier.
                    if req.operation.is_reconfiguration() && pp.seq > self.state.last_executed {
                        self.barrier = Some((view, pp.seq));
                    }
                    if self.state.request_status(req.client, req.timestamp_ms) == RequestStatus::New {
                        self.requests.entry(pp.digest).or_insert((r.clone(), req));
                    }
                }
            }
            let slot = self.log.entry(pp.seq).or_default();
            slot.pre_prepares.insert(view, (pp.digest, env));
            self.proposed.insert(pp.digest);
            if leader != self.cfg.id {
                let vote = Vote { view, seq: pp.seq, digest: pp.digest };
                let prepare = self.sign(MessageKind::Prepare, &vote);
                self.log.get_mut(&pp.seq).unwrap().prepares.entry(view).or_default().insert(self.cfg.id, (pp.digest, prepare.clone()));
                self.broadcast(&prepare);
            }
        }
        let proposed = std::mem::take(&mut self.proposed);
        self.enter_view_common(max_s);
        self.queue.retain(|d| !proposed.contains(d));
        self.proposed = proposed;
        let seqs: Vec<Seq> = self.log.range(min_s + 1..).map(|(s, _)| *s).collect();
        for s in seqs {
            self.check_prepared(s, view);
        }
        if min_s > self.state.last_executed && self.recovery.is_none() {
            self.start_recovery(false);
        }
        self.out.events.push(ReplicaEvent::ViewInstalled(view));
    }

    // ---- state transfer ----

    fn on_state_request(&mut self, from: NodeId, req: StateRequest) {
        if !self.is_member() || self.recovery.is_some() || !self.directory.contains(from) {
            return;
        }
        let Some(snap) = self.snapshots.get(&self.stable.seq) else { return };
        let q = self.quorum();
        let mut log = Vec::new();
        for seq in self.stable.seq + 1..=self.state.last_executed {
            let Some((view, digest)) = self.committed(seq) else { break };
            let slot = &self.log[&seq];
            let commits = slot.commits[&view]
                .values()
                .filter(|(d, _)| *d == digest)
                .take(q)
                .map(|(_, e)| e.clone())
                .collect();
            let request = if digest == NULL_DIGEST { None } else { self.request_body(seq, digest) };
            log.push(CommittedEntry { seq, view, digest, request, commits });
        }
        tracing::debug!(replica = %self.cfg.id, to = %from, have = req.have, seq = self.stable.seq, entries = log.len(), "serving state");
        let reply = StateReply { seq: self.stable.seq, snapshot: codec::encode(snap), proof: self.stable.proof.clone(), log };
        let env = self.sign(MessageKind::StateReply, &reply);
        self.send(from, env);
    }

    fn verify_snapshot(&self, reply: &StateReply) -> Option<ReplicatedState> {
        let state: ReplicatedState = codec::decode(&reply.snapshot).ok()?;
        let digest = Digest::of_bytes(&reply.snapshot);
        if state.last_executed != reply.seq {
            return None;
        }
        if reply.seq == 0 {
            let genesis = ReplicatedState::genesis(self.cfg.initial_membership.clone(), self.cfg.block_size);
            return (genesis.digest() == digest).then_some(state);
        }
        let believed = &self.state.membership;
        let signers: BTreeSet<NodeId> = reply
            .proof
            .iter()
            .filter(|e| {
                open::<CheckpointMsg>(e, MessageKind::Checkpoint, &self.directory)
                    .is_some_and(|c| c.seq == reply.seq && c.state_digest == digest)
            })
            .map(|e| e.sender)
            .collect();
        let trusted = signers.iter().filter(|n| believed.contains(**n)).count();
        (trusted >= believed.weak_quorum()).then_some(state)
    }

    fn on_state_reply(&mut self, donor: NodeId, reply: StateReply) {
        let awaited = self.recovery.is_some() || self.behind_since.is_some();
        if !awaited {
            return;
        }
        let Some(snapshot) = self.verify_snapshot(&reply) else {
            tracing::warn!(replica = %self.cfg.id, %donor, "snapshot does not match attested digest");
            self.out.events.push(ReplicaEvent::SnapshotDigestMismatch { donor });
            if self.recovery.is_some() {
                self.ask_next_donor();
            }
            return;
        };
        if reply.seq > self.state.last_executed {
            let digest = snapshot.digest();
            let was_member = self.is_member();
            self.state = snapshot.clone();
            self.snapshots.insert(reply.seq, snapshot);
            self.stable = Stable { seq: 0, digest, proof: Vec::new() };
            self.set_stable(Stable { seq: reply.seq, digest, proof: reply.proof.clone() });
            self.requests.retain(|_, (_, r)| self.state.request_status(r.client, r.timestamp_ms) == RequestStatus::New);
            self.waiting.retain(|d, _| self.requests.contains_key(d));
            if self.state.history.len() > 1 || !was_member {
                let m = self.state.membership.clone();
                self.out.events.push(ReplicaEvent::MembershipChanged(m));
            }
            // Views restart counting from the snapshot's configuration.
            let view_floor = self.state.history.len() as u64 - 1;
            if self.view < view_floor {
                self.view = view_floor;
                self.mode = Mode::Normal;
            }
            self.next_seq = self.next_seq.max(reply.seq + 1);
        }
        let q = self.quorum();
        for entry in reply.log {
            if entry.seq <= self.state.last_executed || !self.in_window(entry.seq) {
                continue;
            }
            let signers: BTreeMap<NodeId, SignedEnvelope> = entry
                .commits
                .iter()
                .filter(|e| self.state.membership.contains(e.sender))
                .filter(|e| {
                    open::<Vote>(e, MessageKind::Commit, &self.directory)
                        .is_some_and(|v| v.view == entry.view && v.seq == entry.seq && v.digest == entry.digest)
                })
                .map(|e| (e.sender, e.clone()))
                .collect();
            let body_ok = match &entry.request {
                Some(r) => request_digest(r) == entry.digest && self.open_request(r).is_some(),
                None => entry.digest == NULL_DIGEST,
            };
            if signers.len() < q || !body_ok {
                tracing::warn!(%donor, seq = entry.seq, "log entry without valid commit certificate");
                break;
            }
            let slot = self.log.entry(entry.seq).or_default();
            let votes = slot.commits.entry(entry.view).or_default();
            for (n, e) in signers {
                votes.insert(n, (entry.digest, e));
            }
            slot.request = entry.request;
        }
        self.recovery = None;
        self.behind_since = None;
        self.paused = true;
        self.out.events.push(ReplicaEvent::StateInstalled {
            seq: self.state.last_executed,
            block_number: self.state.ordering.latest_block_number,
            block_hash: self.state.ordering.latest_block_hash,
        });
    }
}
