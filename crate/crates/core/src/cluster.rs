//! A whole cluster of nodes over [`SimNetwork`], driven by simulated time.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use crate::block::BlockStore;
use crate::codec;
use crate::crypto::{Digest, KeyDirectory, KeyPair, NodeId};
use crate::node::{Node, NodeError, NodeEvent, NodeParams, Outbound};
use crate::ordering::messages::PrePrepare;
use crate::ordering::types::NULL_DIGEST;
use crate::ordering::Membership;
use crate::transport::{FaultPlan, MessageKind, SignedEnvelope, SimNetwork};
use crate::workflow::HostRegistry;

#[derive(Clone, Debug)]
pub struct ClusterConfig {
    /// Nodes with keys; ids `0..nodes`.
    pub nodes: u32,
    pub membership: Membership,
    pub block_size: usize,
    pub seed: u64,
    pub faults: FaultPlan,
    /// Inclusive per-message latency range in ms.
    pub link_delay: (u64, u64),
    pub tick_ms: u64,
    pub checkpoint_interval: u64,
    pub request_timeout_ms: u64,
    pub view_change_timeout_ms: u64,
    /// Nodes not started with the cluster.
    pub offline: BTreeSet<NodeId>,
    /// Keep block stores on disk under this directory.
    pub data_dir: Option<PathBuf>,
    pub registry: HostRegistry,
    pub record_events: bool,
}

impl ClusterConfig {
    pub fn new(n: u32, block_size: usize, seed: u64) -> Self {
        ClusterConfig {
            nodes: n,
            membership: Membership::of_size(n),
            block_size,
            seed,
            faults: FaultPlan::none(),
            link_delay: (1, 10),
            tick_ms: 50,
            checkpoint_interval: 64,
            request_timeout_ms: 500,
            view_change_timeout_ms: 1_000,
            offline: BTreeSet::new(),
            data_dir: None,
            registry: HostRegistry::with_builtins(),
            record_events: false,
        }
    }
}

pub struct Cluster {
    cfg: ClusterConfig,
    directory: Arc<KeyDirectory>,
    nodes: BTreeMap<NodeId, Node>,
    net: SimNetwork,
    now: u64,
    next_tick: u64,
    events: BTreeMap<NodeId, Vec<NodeEvent>>,
    monitor: Monitor,
}

/// Cross-node checks over what honest nodes report, kept for every run.
#[derive(Debug, Default)]
struct Monitor {
    ordered: BTreeMap<u64, (Digest, NodeId)>,
    blocks: BTreeMap<u64, (Digest, NodeId)>,
    violations: Vec<String>,
}

impl Monitor {
    fn observe(&mut self, node: NodeId, event: &NodeEvent) {
        let (table, key, value, what) = match event {
            NodeEvent::Ordered { seq, request } => (&mut self.ordered, *seq, *request, "sequence"),
            NodeEvent::BlockApplied { number, hash, .. } => (&mut self.blocks, *number, *hash, "block"),
            _ => return,
        };
        match table.get(&key) {
            None => {
                table.insert(key, (value, node));
            }
            Some((seen, by)) if *seen != value => self.violations.push(format!(
                "{what} {key}: {node} has {} but {by} has {}",
                value.short(),
                seen.short()
            )),
            Some(_) => {}
        }
    }
}

impl Cluster {
    pub fn new(cfg: ClusterConfig) -> Self {
        let directory = Arc::new(KeyDirectory::for_test(cfg.nodes));
        let net = SimNetwork::new(cfg.seed, cfg.link_delay, cfg.faults.clone());
        let mut c = Cluster { directory, nodes: BTreeMap::new(), net, now: 0, next_tick: 0, events: BTreeMap::new(), monitor: Monitor::default(), cfg };
        let ids: Vec<NodeId> = (0..c.cfg.nodes).map(NodeId).filter(|id| !c.cfg.offline.contains(id)).collect();
        for id in ids {
            c.start_node(id).expect("fresh node starts");
        }
        c
    }

    fn params(&self, id: NodeId, join: bool) -> NodeParams {
        NodeParams {
            id,
            keys: KeyPair::for_test(id),
            directory: self.directory.clone(),
            membership: self.cfg.membership.clone(),
            block_size: self.cfg.block_size,
            registry: self.cfg.registry.clone(),
            join,
            seed: self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(id.0 as u64),
            request_timeout_ms: self.cfg.request_timeout_ms,
            view_change_timeout_ms: self.cfg.view_change_timeout_ms,
            checkpoint_interval: self.cfg.checkpoint_interval,
        }
    }

    /// Start (or restart) node `id`. Nodes started after time zero, or that
    /// are not initial members, join by fetching state.
    pub fn start_node(&mut self, id: NodeId) -> Result<(), NodeError> {
        let join = self.now > 0 || !self.cfg.membership.contains(id);
        let store = match &self.cfg.data_dir {
            Some(dir) => BlockStore::open(dir.join(id.to_string())).map_err(|e| NodeError::Halted(e.to_string()))?,
            None => BlockStore::in_memory(),
        };
        let mut node = Node::new(self.params(id, join), store)?;
        let out = node.start(self.now);
        self.nodes.insert(id, node);
        self.dispatch(id, out);
        Ok(())
    }

    /// Remove a node from the simulation, as if its process stopped.
    pub fn stop_node(&mut self, id: NodeId) -> Option<Node> {
        self.nodes.remove(&id)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[&id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes.get_mut(&id).expect("node is running")
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn is_running(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id) && !self.net.plan().crashed(id, self.now)
    }

    /// Running nodes with no injected faults.
    pub fn honest(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().filter(|id| !self.net.plan().is_faulty(*id)).collect()
    }

    pub fn events(&self, id: NodeId) -> &[NodeEvent] {
        self.events.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Disagreements between honest nodes about what was executed at a
    /// sequence number or which block sits at a height. Empty in a safe run.
    pub fn violations(&self) -> &[String] {
        &self.monitor.violations
    }

    /// Highest sequence number any honest node executed.
    pub fn max_ordered_seq(&self) -> u64 {
        self.monitor.ordered.keys().next_back().copied().unwrap_or(0)
    }

    pub fn transcript(&self) -> Digest {
        self.net.transcript()
    }

    pub fn network_stats(&self) -> (u64, u64) {
        self.net.stats()
    }

    /// Run an operation on node `id` and send what it produces.
    pub fn with_node<T>(
        &mut self,
        id: NodeId,
        f: impl FnOnce(&mut Node, u64) -> Result<(T, Outbound), NodeError>,
    ) -> Result<T, NodeError> {
        let now = self.now;
        let node = self.nodes.get_mut(&id).expect("node is running");
        let (value, out) = f(node, now)?;
        self.collect_events(id);
        self.dispatch(id, out);
        Ok(value)
    }

    fn collect_events(&mut self, id: NodeId) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let ev = node.drain_events();
        if !self.net.plan().is_faulty(id) {
            for e in &ev {
                self.monitor.observe(id, e);
            }
        }
        if self.cfg.record_events && !ev.is_empty() {
            self.events.entry(id).or_default().extend(ev);
        }
    }

    fn dispatch(&mut self, from: NodeId, out: Outbound) {
        for (to, env) in out {
            let env = self.maybe_equivocate(from, to, env);
            self.net.send(self.now, from, to, env);
        }
    }

    /// A faulty node told to equivocate on pre-prepares sends half of its
    /// peers a conflicting (empty) proposal for the same slot.
    fn maybe_equivocate(&self, from: NodeId, to: NodeId, env: SignedEnvelope) -> SignedEnvelope {
        if !self.net.plan().equivocates(from, env.kind) || to.0.is_multiple_of(2) {
            return env;
        }
        match env.kind {
            MessageKind::PrePrepare => {
                let Ok(pp) = codec::decode::<PrePrepare>(&env.body) else { return env };
                let forged = PrePrepare { digest: NULL_DIGEST, request: None, ..pp };
                SignedEnvelope::sign(&KeyPair::for_test(from), from, env.kind, codec::encode(&forged))
            }
            _ => env,
        }
    }

    /// Process events until simulated time `until`.
    pub fn run_until(&mut self, until: u64) {
        loop {
            let next_msg = self.net.next_time().unwrap_or(u64::MAX);
            if next_msg <= self.next_tick && next_msg <= until {
                // Deliveries to crashed or cut-off nodes vanish inside pop.
                let Some(d) = self.net.pop(until) else { continue };
                self.now = self.now.max(d.at);
                if !self.is_running(d.to) {
                    continue;
                }
                let out = self.nodes.get_mut(&d.to).unwrap().handle(d.envelope, self.now);
                self.collect_events(d.to);
                self.dispatch(d.to, out);
            } else if self.next_tick <= until {
                self.now = self.now.max(self.next_tick);
                self.next_tick += self.cfg.tick_ms;
                let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
                for id in ids {
                    if !self.is_running(id) {
                        continue;
                    }
                    let out = self.nodes.get_mut(&id).unwrap().tick(self.now);
                    self.collect_events(id);
                    self.dispatch(id, out);
                }
            } else {
                self.now = until;
                return;
            }
        }
    }

    pub fn run_for(&mut self, ms: u64) {
        self.run_until(self.now + ms);
    }

    /// Run until `done` holds, checking every `step` ms, for at most `limit` ms.
    pub fn run_until_cond(&mut self, step: u64, limit: u64, mut done: impl FnMut(&Cluster) -> bool) -> bool {
        let end = self.now + limit;
        while self.now < end {
            if done(self) {
                return true;
            }
            self.run_for(step);
        }
        done(self)
    }

    /// Head hash of every running node's chain.
    pub fn heads(&self) -> BTreeMap<NodeId, (u64, Digest)> {
        self.nodes.iter().map(|(id, n)| (*id, (n.store().head_number(), n.store().head_hash()))).collect()
    }

    /// Whether the given nodes' chains agree on every block they share.
    pub fn chains_consistent(&self, ids: &[NodeId]) -> bool {
        let chains: Vec<Vec<Digest>> = ids.iter().map(|id| self.nodes[id].store().chain().map(|b| b.hash).collect()).collect();
        chains.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| a == b))
    }
}
