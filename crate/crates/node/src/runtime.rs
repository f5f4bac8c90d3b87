//! The node's single logical event loop. One task owns the sans-IO
//! [`Node`]; peers, timers and API requests reach it through queues, so
//! every mutation is serialized and every event is published only after the
//! state it describes can be read.

use std::collections::HashMap;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use ledgerflow::crypto::{Digest, NodeId};
use ledgerflow::node::{Node, NodeError, NodeEvent};
use ledgerflow::transport::SignedEnvelope;
use ledgerflow::workflow::{CaseId, DataMap, RejectReason, WorkItemId, WorkflowModel};
use serde_json::json;
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use crate::dto;
use crate::transport::Transport;

pub const TICK: Duration = Duration::from_millis(20);

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Final fate of a submitted transaction.
#[derive(Clone, Debug, PartialEq)]
pub enum TxOutcome {
    Committed { block_number: u64 },
    Rejected(RejectReason),
    Divergent,
}

pub struct Submitted {
    pub tx_id: Digest,
    pub outcome: oneshot::Receiver<TxOutcome>,
}

pub type Reply<T> = oneshot::Sender<Result<T, NodeError>>;

/// Raw JSON data from the API; converted with the model's declared types
/// inside the loop.
pub type JsonData = serde_json::Map<String, serde_json::Value>;

pub enum Command {
    Read(Box<dyn FnOnce(&Node) + Send>),
    CompleteWorkItem { id: WorkItemId, outputs: JsonData, reply: Reply<Submitted> },
    InstallModel { model: WorkflowModel, reply: Reply<Submitted> },
    LaunchCase { model_id: String, data: JsonData, reply: Reply<(CaseId, Submitted)> },
}

/// A pushed notification, as sent on the event stream.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ApiEvent {
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub at: String,
    pub data: serde_json::Value,
}

/// Cloneable access to the event loop.
#[derive(Clone)]
pub struct NodeHandle {
    pub id: NodeId,
    commands: mpsc::Sender<Command>,
    events: broadcast::Sender<ApiEvent>,
}

impl NodeHandle {
    /// Run `f` against the node inside the loop and return its result.
    pub async fn read<T: Send + 'static>(&self, f: impl FnOnce(&Node) -> T + Send + 'static) -> Option<T> {
        let (tx, rx) = oneshot::channel();
        let cmd = Command::Read(Box::new(move |n| {
            let _ = tx.send(f(n));
        }));
        self.commands.send(cmd).await.ok()?;
        rx.await.ok()
    }

    pub async fn command<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Option<Result<T, NodeError>> {
        let (tx, rx) = oneshot::channel();
        self.commands.send(make(tx)).await.ok()?;
        rx.await.ok()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ApiEvent> {
        self.events.subscribe()
    }
}

pub struct EventLoop {
    node: Node,
    transport: Transport,
    inbox: mpsc::Receiver<SignedEnvelope>,
    commands: mpsc::Receiver<Command>,
    events: broadcast::Sender<ApiEvent>,
    waiters: HashMap<Digest, Vec<oneshot::Sender<TxOutcome>>>,
}

impl EventLoop {
    pub fn new(node: Node, transport: Transport, inbox: mpsc::Receiver<SignedEnvelope>) -> (Self, NodeHandle) {
        let (cmd_tx, commands) = mpsc::channel(1_024);
        let (events, _) = broadcast::channel(4_096);
        let handle = NodeHandle { id: node.id(), commands: cmd_tx, events: events.clone() };
        (EventLoop { node, transport, inbox, commands, events, waiters: HashMap::new() }, handle)
    }

    /// Run until `shutdown` flips to true or every handle is dropped.
    pub async fn run(mut self, mut shutdown: watch::Receiver<bool>) -> Node {
        let out = self.node.start(now_ms());
        self.send(out);
        self.publish();
        let mut ticker = tokio::time::interval(TICK);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                Some(env) = self.inbox.recv() => {
                    let out = self.node.handle(env, now_ms());
                    self.send(out);
                }
                cmd = self.commands.recv() => match cmd {
                    Some(cmd) => self.on_command(cmd),
                    None => break,
                },
                _ = ticker.tick() => {
                    let out = self.node.tick(now_ms());
                    self.send(out);
                }
                _ = shutdown.changed() => break,
            }
            self.publish();
        }
        self.node
    }

    fn send(&self, out: Vec<(NodeId, SignedEnvelope)>) {
        for (to, env) in out {
            self.transport.send(to, &env);
        }
    }

    fn on_command(&mut self, cmd: Command) {
        let now = now_ms();
        match cmd {
            Command::Read(f) => f(&self.node),
            Command::CompleteWorkItem { id, outputs, reply } => {
                let res = self.typed_outputs(id, &outputs).and_then(|data| self.node.complete_work_item(id, data, now));
                let res = res.map(|(tx_id, out)| {
                    self.send(out);
                    self.wait_for(tx_id)
                });
                let _ = reply.send(res);
            }
            Command::InstallModel { model, reply } => {
                let res = self.node.install_model(model, now).map(|out| {
                    self.send(out);
                    let tx_id = self.node.last_submission().unwrap_or(Digest::ZERO);
                    self.wait_for(tx_id)
                });
                let _ = reply.send(res);
            }
            Command::LaunchCase { model_id, data, reply } => {
                let res = self.typed_case_data(&model_id, &data).and_then(|d| self.node.launch_case(&model_id, d, now));
                let res = res.map(|(case, out)| {
                    self.send(out);
                    let tx_id = self.node.last_submission().unwrap_or(Digest::ZERO);
                    (case, self.wait_for(tx_id))
                });
                let _ = reply.send(res);
            }
        }
    }

    fn typed_outputs(&self, id: WorkItemId, raw: &JsonData) -> Result<DataMap, NodeError> {
        let engine = self.node.engine();
        let model = engine
            .work_item(id)
            .and_then(|w| engine.case(&w.case_id))
            .and_then(|c| engine.model(&c.model_id));
        dto::data_from_json(raw, model).map_err(|e| NodeError::Engine(ledgerflow::workflow::EngineError::TypeMismatch(e)))
    }

    fn typed_case_data(&self, model_id: &str, raw: &JsonData) -> Result<DataMap, NodeError> {
        let model = self.node.engine().model(model_id);
        dto::data_from_json(raw, model).map_err(|e| NodeError::Engine(ledgerflow::workflow::EngineError::TypeMismatch(e)))
    }

    fn wait_for(&mut self, tx_id: Digest) -> Submitted {
        let (tx, rx) = oneshot::channel();
        if let Some(n) = self.committed_in(&tx_id) {
            let _ = tx.send(TxOutcome::Committed { block_number: n });
        } else {
            self.waiters.entry(tx_id).or_default().push(tx);
        }
        Submitted { tx_id, outcome: rx }
    }

    fn committed_in(&self, tx_id: &Digest) -> Option<u64> {
        let store = self.node.store();
        let head = store.head_number();
        (head.saturating_sub(8)..=head).rev().find(|n| {
            store.get(*n).is_some_and(|b| b.transactions.iter().any(|t| t.id() == *tx_id))
        })
    }

    fn resolve(&mut self, tx_id: &Digest, outcome: TxOutcome) {
        for w in self.waiters.remove(tx_id).into_iter().flatten() {
            let _ = w.send(outcome.clone());
        }
    }

    fn emit(&self, kind: &'static str, data: serde_json::Value) {
        let _ = self.events.send(ApiEvent { kind, at: dto::iso(now_ms()), data });
    }

    /// Translate node events into waiter outcomes and pushed events.
    fn publish(&mut self) {
        for ev in self.node.drain_events() {
            match ev {
                NodeEvent::BlockApplied { number, hash, transactions } => {
                    let ids: Vec<Digest> = self
                        .node
                        .store()
                        .get(number)
                        .map(|b| b.transactions.iter().map(|t| t.id()).collect())
                        .unwrap_or_default();
                    for id in &ids {
                        self.resolve(id, TxOutcome::Committed { block_number: number });
                    }
                    self.emit("BLOCK_APPLIED", json!({ "number": number, "hash": hash.to_hex(), "transactions": transactions }));
                }
                NodeEvent::TransactionDecided { tx_id, accepted: false, reason } => {
                    let reason = reason.unwrap_or(RejectReason::DuplicateTransaction);
                    self.resolve(&tx_id, TxOutcome::Rejected(reason));
                }
                NodeEvent::TransactionDecided { .. } => {}
                NodeEvent::Divergence { tx_id, .. } => {
                    if let Some(tx_id) = tx_id {
                        self.resolve(&tx_id, TxOutcome::Divergent);
                    }
                }
                NodeEvent::WorkItemAdded(w) => {
                    let data = dto::work_item(&w, self.node.store());
                    self.emit("WORK_ITEM_ADDED", serde_json::to_value(data).unwrap_or_default());
                }
                NodeEvent::WorkItemWithdrawn(id) => {
                    self.emit("WORK_ITEM_WITHDRAWN", json!({ "workItemId": id.to_string(), "reason": "WITHDRAWN" }));
                }
                NodeEvent::WorkItemCompleted(id) => {
                    self.emit("WORK_ITEM_WITHDRAWN", json!({ "workItemId": id.to_string(), "reason": "COMPLETED" }));
                }
                NodeEvent::CaseUpdated(c) => {
                    self.emit("CASE_UPDATED", serde_json::to_value(dto::case(&c)).unwrap_or_default());
                }
                NodeEvent::PendingTxChanged { pending } => {
                    let mine = dto::pending_submissions(&self.node);
                    self.emit("PENDING_TX_CHANGED", json!({ "pendingQueueLength": pending, "pendingSubmissions": mine }));
                }
                NodeEvent::StatusChanged(s) => tracing::info!(node = %self.node.id(), status = ?s, "node status"),
                NodeEvent::SelfCheckFailed { timestamp_ms } => {
                    tracing::error!(node = %self.node.id(), timestamp_ms, "self-check failed, node is resynchronizing");
                }
                NodeEvent::ExternalCallFailed { work_item, error } => {
                    tracing::warn!(node = %self.node.id(), %work_item, %error, "external call failed");
                }
                NodeEvent::Ordered { .. } | NodeEvent::ViewChanged(_) | NodeEvent::MembershipChanged(_) => {}
            }
        }
    }
}
