//! The workflow engine.
//!
//! Case state lives on the chain: every `InstanceState` transaction carries
//! the full marking and data of its case, and applying a block simply copies
//! those snapshots into the engine's materialized view. Validation decides
//! whether a proposed snapshot follows from the current one by firing exactly
//! one enabled transition.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::marking::Marking;
use super::model::{ModelError, TransitionDef, WorkflowModel};
use super::registry::{ExternalCallError, HostRegistry};
use super::transaction::{CaseId, InstanceState, Transaction, TxBody};
use super::value::DataMap;
use crate::block::Block;
use crate::crypto::{Digest, KeyDirectory, KeyPair, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaseStatus {
    Running,
    Finished,
    Deadlocked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseState {
    pub case_id: CaseId,
    pub model_id: String,
    pub marking: Marking,
    pub data: DataMap,
    pub status: CaseStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WorkItemId(pub u64);

impl std::fmt::Display for WorkItemId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkItemStatus {
    Enabled,
    Completed,
    Withdrawn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub id: WorkItemId,
    pub case_id: CaseId,
    pub transition: String,
    pub input_values: DataMap,
    pub status: WorkItemStatus,
    pub output_values: Option<DataMap>,
    /// Block number whose application enabled this item.
    pub enabled_at: u64,
    /// Transaction submitted for this item and not yet committed.
    pub locked_by: Option<Digest>,
}

/// Deterministic validation outcome, identical on every honest replica.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum RejectReason {
    #[error("transaction already queued")]
    DuplicateTransaction,
    #[error("transaction signature invalid")]
    BadSignature,
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("model `{0}` already installed")]
    DuplicateModel(String),
    #[error("malformed model: {0}")]
    MalformedModel(ModelError),
    #[error("case belongs to a different model")]
    ModelMismatch,
    #[error("new case must start in the model's initial marking")]
    NotInitialMarking,
    #[error("marking is not reachable by a single enabled firing")]
    NotReachable,
    #[error("data constraint violated: {0}")]
    ConstraintViolated(String),
    #[error("variables {0:?} changed outside the fired transition's outputs")]
    DataChangeNotAllowed(Vec<String>),
    #[error("data type mismatch: {0}")]
    DataTypeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("malformed model: {0}")]
    MalformedModel(#[from] ModelError),
    #[error("unknown work item {0}")]
    UnknownWorkItem(WorkItemId),
    #[error("work item {0} is stale")]
    WorkItemStale(WorkItemId),
    #[error("work item {0} already has a pending submission")]
    WorkItemLocked(WorkItemId),
    #[error("type mismatch: {0}")]
    TypeMismatch(String),
}

/// Observable consequences of applying a block.
#[derive(Clone, Debug, PartialEq)]
pub enum EngineEffect {
    ModelInstalled(String),
    CaseLaunched(CaseId),
    CaseUpdated(CaseId),
    CaseFinished(CaseId),
    CaseDeadlocked(CaseId),
    WorkItemAdded(WorkItemId),
    WorkItemWithdrawn(WorkItemId),
    WorkItemCompleted(WorkItemId),
    /// An automated activity ran its host function; the transaction must be
    /// submitted for ordering.
    AutoCompleted { work_item: WorkItemId, tx: Transaction },
    ExternalCallFailed { work_item: WorkItemId, error: ExternalCallError },
}

/// Transitions of `model` whose firing turns `from` into `to`.
pub fn firing_candidates<'m>(model: &'m WorkflowModel, from: &Marking, to: &Marking) -> Vec<&'m TransitionDef> {
    model
        .enabled_transitions(from)
        .into_iter()
        .filter(|t| from.fire(&t.input_places, &t.output_places).as_ref() == Some(to))
        .collect()
}

fn changed_variables(before: &DataMap, after: &DataMap) -> Vec<String> {
    let keys: BTreeSet<&String> = before.keys().chain(after.keys()).collect();
    keys.into_iter().filter(|k| before.get(*k) != after.get(*k)).cloned().collect()
}

pub struct Engine {
    node: NodeId,
    keys: KeyPair,
    directory: Arc<KeyDirectory>,
    registry: HostRegistry,
    models: BTreeMap<String, WorkflowModel>,
    cases: BTreeMap<CaseId, CaseState>,
    work_items: BTreeMap<WorkItemId, WorkItem>,
    last_block: Option<u64>,
    launch_counter: u64,
    nonce: ChaCha8Rng,
    run_external_calls: bool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("node", &self.node)
            .field("models", &self.models.len())
            .field("cases", &self.cases.len())
            .field("last_block", &self.last_block)
            .finish()
    }
}

impl Engine {
    pub fn new(node: NodeId, keys: KeyPair, directory: Arc<KeyDirectory>, registry: HostRegistry) -> Self {
        Self::with_nonce_seed(node, keys, directory, registry, rand::random())
    }

    /// Engine whose case-id nonces come from a fixed seed (simulations).
    pub fn with_nonce_seed(
        node: NodeId,
        keys: KeyPair,
        directory: Arc<KeyDirectory>,
        registry: HostRegistry,
        seed: u64,
    ) -> Self {
        Engine {
            node,
            keys,
            directory,
            registry,
            models: BTreeMap::new(),
            cases: BTreeMap::new(),
            work_items: BTreeMap::new(),
            last_block: None,
            launch_counter: 0,
            nonce: ChaCha8Rng::seed_from_u64(seed),
            run_external_calls: true,
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn models(&self) -> &BTreeMap<String, WorkflowModel> {
        &self.models
    }

    pub fn model(&self, id: &str) -> Option<&WorkflowModel> {
        self.models.get(id)
    }

    pub fn cases(&self) -> &BTreeMap<CaseId, CaseState> {
        &self.cases
    }

    pub fn case(&self, id: &CaseId) -> Option<&CaseState> {
        self.cases.get(id)
    }

    pub fn work_item(&self, id: WorkItemId) -> Option<&WorkItem> {
        self.work_items.get(&id)
    }

    /// ENABLED work items, i.e. this node's worklist.
    pub fn worklist(&self) -> Vec<&WorkItem> {
        self.work_items.values().filter(|w| w.status == WorkItemStatus::Enabled).collect()
    }

    pub fn last_applied_block(&self) -> Option<u64> {
        self.last_block
    }

    /// Validate `tx` against the applied chain state and, optionally, the
    /// most recent queued transaction.
    pub fn validate_transaction(&self, tx: &Transaction, pending: Option<&Transaction>) -> Result<(), RejectReason> {
        if !tx.verify(&self.directory) {
            return Err(RejectReason::BadSignature);
        }
        match &tx.body {
            TxBody::ModelUpdate(model) => {
                let queued = pending.and_then(Transaction::model).is_some_and(|m| m.model_id == model.model_id);
                if queued || self.models.contains_key(&model.model_id) {
                    return Err(RejectReason::DuplicateModel(model.model_id.clone()));
                }
                model.validate().map_err(RejectReason::MalformedModel)
            }
            TxBody::InstanceState(state) => self.validate_instance(state, pending),
        }
    }

    fn validate_instance(&self, state: &InstanceState, pending: Option<&Transaction>) -> Result<(), RejectReason> {
        let model = self
            .models
            .get(&state.model_id)
            .or_else(|| pending.and_then(Transaction::model).filter(|m| m.model_id == state.model_id))
            .ok_or_else(|| RejectReason::UnknownModel(state.model_id.clone()))?;
        model.check_data(&state.data).map_err(RejectReason::DataTypeMismatch)?;

        let base = match pending.and_then(Transaction::instance) {
            Some(p) if p.case_id == state.case_id => Some((&p.model_id, &p.marking, &p.data)),
            _ => self.cases.get(&state.case_id).map(|c| (&c.model_id, &c.marking, &c.data)),
        };

        match base {
            None => {
                if state.marking != model.initial_marking {
                    return Err(RejectReason::NotInitialMarking);
                }
                if let Some(c) = model.violated_constraint(&state.data) {
                    return Err(RejectReason::ConstraintViolated(c.description.clone()));
                }
                Ok(())
            }
            Some((base_model, base_marking, base_data)) => {
                if *base_model != state.model_id {
                    return Err(RejectReason::ModelMismatch);
                }
                let candidates = firing_candidates(model, base_marking, &state.marking);
                if candidates.is_empty() {
                    return Err(RejectReason::NotReachable);
                }
                if let Some(c) = model.violated_constraint(&state.data) {
                    return Err(RejectReason::ConstraintViolated(c.description.clone()));
                }
                let changed = changed_variables(base_data, &state.data);
                let allowed = candidates
                    .iter()
                    .any(|t| changed.iter().all(|v| t.output_variables.contains(v)));
                if !allowed {
                    return Err(RejectReason::DataChangeNotAllowed(changed));
                }
                Ok(())
            }
        }
    }

    /// Apply a committed block. Blocks must arrive in number order.
    pub fn apply_block(&mut self, block: &Block) -> Vec<EngineEffect> {
        if let Some(last) = self.last_block {
            if block.number <= last {
                tracing::warn!(block = block.number, last, "ignoring already applied block");
                return Vec::new();
            }
            debug_assert_eq!(block.number, last + 1, "blocks must be applied without gaps");
        }
        let mut effects = Vec::new();
        let mut touched: Vec<CaseId> = Vec::new();
        for tx in &block.transactions {
            let tx_id = tx.id();
            for item in self.work_items.values_mut() {
                if item.locked_by == Some(tx_id) && item.status == WorkItemStatus::Enabled {
                    item.status = WorkItemStatus::Completed;
                    item.locked_by = None;
                    item.output_values = tx.instance().map(|s| {
                        s.data.iter().filter(|(k, v)| item.input_values.get(*k) != Some(*v)).map(|(k, v)| (k.clone(), v.clone())).collect()
                    });
                    effects.push(EngineEffect::WorkItemCompleted(item.id));
                }
            }
            match &tx.body {
                TxBody::ModelUpdate(model) => {
                    if !self.models.contains_key(&model.model_id) {
                        self.models.insert(model.model_id.clone(), model.clone());
                        effects.push(EngineEffect::ModelInstalled(model.model_id.clone()));
                    }
                }
                TxBody::InstanceState(state) => {
                    let launched = !self.cases.contains_key(&state.case_id);
                    self.cases.insert(
                        state.case_id,
                        CaseState {
                            case_id: state.case_id,
                            model_id: state.model_id.clone(),
                            marking: state.marking.clone(),
                            data: state.data.clone(),
                            status: CaseStatus::Running,
                        },
                    );
                    effects.push(if launched {
                        EngineEffect::CaseLaunched(state.case_id)
                    } else {
                        EngineEffect::CaseUpdated(state.case_id)
                    });
                    if !touched.contains(&state.case_id) {
                        touched.push(state.case_id);
                    }
                }
            }
        }
        self.last_block = Some(block.number);
        for case_id in touched {
            self.refresh_case(&case_id, block.number, &mut effects);
        }
        effects
    }

    fn refresh_case(&mut self, case_id: &CaseId, block_number: u64, effects: &mut Vec<EngineEffect>) {
        let Some(case) = self.cases.get(case_id) else { return };
        let Some(model) = self.models.get(&case.model_id) else {
            tracing::error!(case = %case_id.short(), "case references unknown model");
            return;
        };
        let enabled: Vec<&TransitionDef> = model.enabled_transitions(&case.marking);
        let enabled_names: BTreeSet<&str> = enabled.iter().map(|t| t.name.as_str()).collect();

        let status = if !enabled.is_empty() {
            CaseStatus::Running
        } else if case.marking.places().all(|p| model.end_places.contains(p)) {
            CaseStatus::Finished
        } else {
            CaseStatus::Deadlocked
        };

        let mut still_open = BTreeSet::new();
        for item in self.work_items.values_mut().filter(|w| w.case_id == *case_id) {
            if item.status != WorkItemStatus::Enabled {
                continue;
            }
            if enabled_names.contains(item.transition.as_str()) {
                let t = model.transition(&item.transition).expect("enabled transition exists");
                item.input_values = pick(&case.data, &t.input_variables);
                still_open.insert(item.transition.clone());
            } else {
                item.status = WorkItemStatus::Withdrawn;
                item.locked_by = None;
                effects.push(EngineEffect::WorkItemWithdrawn(item.id));
            }
        }

        let mut created = Vec::new();
        for t in enabled.iter().filter(|t| t.assigned_node == self.node && !still_open.contains(&t.name)) {
            let id = WorkItemId(u64::from_be_bytes(
                Digest::of(&(case_id, &t.name, block_number)).0[..8].try_into().unwrap(),
            ));
            self.work_items.insert(
                id,
                WorkItem {
                    id,
                    case_id: *case_id,
                    transition: t.name.clone(),
                    input_values: pick(&case.data, &t.input_variables),
                    status: WorkItemStatus::Enabled,
                    output_values: None,
                    enabled_at: block_number,
                    locked_by: None,
                },
            );
            effects.push(EngineEffect::WorkItemAdded(id));
            if t.external_call.is_some() {
                created.push(id);
            }
        }

        let case = self.cases.get_mut(case_id).expect("case present");
        case.status = status;
        match status {
            CaseStatus::Finished => effects.push(EngineEffect::CaseFinished(*case_id)),
            CaseStatus::Deadlocked => effects.push(EngineEffect::CaseDeadlocked(*case_id)),
            CaseStatus::Running => {}
        }

        if self.run_external_calls {
            for id in created {
                effects.push(self.run_external(id));
            }
        }
    }

    fn run_external(&mut self, id: WorkItemId) -> EngineEffect {
        let item = &self.work_items[&id];
        let case = &self.cases[&item.case_id];
        let t = self.models[&case.model_id].transition(&item.transition).expect("transition exists");
        let name = t.external_call.clone().expect("automated transition");
        let outputs = match self.external_call(&name, &item.input_values.clone()) {
            Ok(out) => out.into_iter().filter(|(k, _)| t.output_variables.contains(k)).collect(),
            Err(error) => {
                tracing::warn!(%error, work_item = %id, "external call failed, item left for manual handling");
                return EngineEffect::ExternalCallFailed { work_item: id, error };
            }
        };
        match self.complete_work_item(id, outputs) {
            Ok(tx) => EngineEffect::AutoCompleted { work_item: id, tx },
            Err(e) => EngineEffect::ExternalCallFailed {
                work_item: id,
                error: ExternalCallError::Failed { name, message: e.to_string() },
            },
        }
    }

    /// Invoke a registered host function.
    pub fn external_call(&self, name: &str, inputs: &DataMap) -> Result<DataMap, ExternalCallError> {
        self.registry.call(name, inputs)
    }

    /// Complete an enabled work item, producing the successor case snapshot
    /// as a signed transaction. The item stays locked until that transaction
    /// commits or is rejected.
    pub fn complete_work_item(&mut self, id: WorkItemId, outputs: DataMap) -> Result<Transaction, EngineError> {
        let item = self.work_items.get(&id).ok_or(EngineError::UnknownWorkItem(id))?;
        if item.status != WorkItemStatus::Enabled {
            return Err(EngineError::WorkItemStale(id));
        }
        if item.locked_by.is_some() {
            return Err(EngineError::WorkItemLocked(id));
        }
        let case = self.cases.get(&item.case_id).ok_or(EngineError::WorkItemStale(id))?;
        let model = self
            .models
            .get(&case.model_id)
            .ok_or_else(|| EngineError::UnknownModel(case.model_id.clone()))?;
        let t = model.transition(&item.transition).ok_or(EngineError::WorkItemStale(id))?;
        for (k, v) in &outputs {
            if !t.output_variables.contains(k) {
                return Err(EngineError::TypeMismatch(format!("`{k}` is not an output of `{}`", t.name)));
            }
            let ty = model.variable_type(k).expect("validated model declares outputs");
            if !v.conforms_to(ty) {
                return Err(EngineError::TypeMismatch(format!("`{k}` expects {ty}, got {}", v.value_type())));
            }
        }
        let marking = case
            .marking
            .fire(&t.input_places, &t.output_places)
            .ok_or(EngineError::WorkItemStale(id))?;
        let mut data = case.data.clone();
        data.extend(outputs);
        let tx = Transaction::sign(
            TxBody::InstanceState(InstanceState {
                case_id: case.case_id,
                model_id: case.model_id.clone(),
                marking,
                data,
            }),
            self.node,
            &self.keys,
        );
        self.work_items.get_mut(&id).expect("present").locked_by = Some(tx.id());
        Ok(tx)
    }

    /// Unlock the work item whose submission `tx_id` was rejected, so it is
    /// offered again against the current case state.
    pub fn release_submission(&mut self, tx_id: &Digest) -> Option<WorkItemId> {
        let item = self.work_items.values_mut().find(|w| w.locked_by.as_ref() == Some(tx_id))?;
        item.locked_by = None;
        Some(item.id)
    }

    pub fn launch_case(&mut self, model_id: &str, initial_data: DataMap) -> Result<Transaction, EngineError> {
        let model = self.models.get(model_id).ok_or_else(|| EngineError::UnknownModel(model_id.to_string()))?;
        model.check_data(&initial_data).map_err(EngineError::TypeMismatch)?;
        let case_id = Digest::of(&(self.node, model_id, self.launch_counter, self.nonce.next_u64()));
        self.launch_counter += 1;
        Ok(Transaction::sign(
            TxBody::InstanceState(InstanceState {
                case_id,
                model_id: model_id.to_string(),
                marking: model.initial_marking.clone(),
                data: initial_data,
            }),
            self.node,
            &self.keys,
        ))
    }

    pub fn install_model(&self, model: WorkflowModel) -> Result<Transaction, EngineError> {
        model.validate()?;
        Ok(Transaction::sign(TxBody::ModelUpdate(model), self.node, &self.keys))
    }

    /// Rebuild the materialized state from a verified chain. Host functions
    /// are not re-run for historical blocks; automated items enabled in the
    /// final state are executed once at the end.
    pub fn materialize<'a>(&mut self, blocks: impl IntoIterator<Item = &'a Block>) -> Vec<EngineEffect> {
        self.run_external_calls = false;
        for block in blocks {
            self.apply_block(block);
        }
        self.run_external_calls = true;
        let pending: Vec<WorkItemId> = self
            .work_items
            .values()
            .filter(|w| w.status == WorkItemStatus::Enabled && w.locked_by.is_none())
            .filter(|w| {
                let model = &self.models[&self.cases[&w.case_id].model_id];
                model.transition(&w.transition).is_some_and(|t| t.external_call.is_some())
            })
            .map(|w| w.id)
            .collect();
        pending.into_iter().map(|id| self.run_external(id)).collect()
    }
}

fn pick(data: &DataMap, names: &[String]) -> DataMap {
    names.iter().filter_map(|n| data.get(n).map(|v| (n.clone(), v.clone()))).collect()
}

/// Latest snapshot per case, found by reading the chain backwards from the
/// head: the first `InstanceState` seen for a case is its current state.
pub fn case_states_from_chain(blocks: &[Block]) -> BTreeMap<CaseId, InstanceState> {
    let mut out = BTreeMap::new();
    for block in blocks.iter().rev() {
        for tx in block.transactions.iter().rev() {
            if let Some(s) = tx.instance() {
                out.entry(s.case_id).or_insert_with(|| s.clone());
            }
        }
    }
    out
}
