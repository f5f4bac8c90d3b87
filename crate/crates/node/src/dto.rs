//! JSON shapes of the worklist API. Field names are camelCase, ids are hex
//! strings and timestamps ISO-8601 UTC.

use std::collections::BTreeMap;

use chrono::{DateTime, SecondsFormat, Utc};
use ledgerflow::block::BlockStore;
use ledgerflow::node::{Node, NodeStatus};
use ledgerflow::workflow::{CaseState, CaseStatus, DataMap, TxBody, Value, ValueType, WorkItem, WorkflowModel};
use serde::{Deserialize, Serialize};

pub fn iso(ms: u64) -> String {
    DateTime::<Utc>::from_timestamp_millis(ms as i64)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn value_to_json(v: &Value) -> serde_json::Value {
    match v {
        Value::Integer(i) => (*i).into(),
        Value::Real(r) => serde_json::Number::from_f64(*r).map_or(serde_json::Value::Null, serde_json::Value::Number),
        Value::Text(s) => s.clone().into(),
        Value::Boolean(b) => (*b).into(),
    }
}

pub fn data_to_json(d: &DataMap) -> BTreeMap<String, serde_json::Value> {
    d.iter().map(|(k, v)| (k.clone(), value_to_json(v))).collect()
}

/// Convert one JSON value, guided by the declared type when known. Strings
/// are parsed as the declared type, so CLI `k=v` pairs work unchanged.
pub fn value_from_json(v: &serde_json::Value, ty: Option<ValueType>) -> Result<Value, String> {
    use serde_json::Value as J;
    let bad = || format!("{v} is not a valid {}", ty.map_or("value".to_string(), |t| t.to_string()));
    match (v, ty) {
        (J::String(s), Some(t)) => Value::parse_as(s, t).ok_or_else(bad),
        (J::String(s), None) => Ok(Value::Text(s.clone())),
        (J::Bool(b), None | Some(ValueType::Boolean)) => Ok(Value::Boolean(*b)),
        (J::Number(n), Some(ValueType::Real)) => n.as_f64().map(Value::Real).ok_or_else(bad),
        (J::Number(n), _) if n.is_i64() => Ok(Value::Integer(n.as_i64().unwrap())),
        (J::Number(n), None) => n.as_f64().map(Value::Real).ok_or_else(bad),
        _ => Err(bad()),
    }
}

pub fn data_from_json(
    raw: &serde_json::Map<String, serde_json::Value>,
    model: Option<&WorkflowModel>,
) -> Result<DataMap, String> {
    raw.iter()
        .map(|(k, v)| {
            let ty = model.and_then(|m| m.variable_type(k));
            value_from_json(v, ty).map(|val| (k.clone(), val)).map_err(|e| format!("{k}: {e}"))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorkItemView {
    pub work_item_id: String,
    pub case_id: String,
    pub transition_name: String,
    pub input_values: BTreeMap<String, serde_json::Value>,
    /// When the block that enabled the item was ordered.
    pub enabled_at: String,
    pub enabled_at_block: u64,
}

pub fn work_item(w: &WorkItem, store: &BlockStore) -> WorkItemView {
    WorkItemView {
        work_item_id: w.id.to_string(),
        case_id: w.case_id.to_hex(),
        transition_name: w.transition.clone(),
        input_values: data_to_json(&w.input_values),
        enabled_at: iso(store.get(w.enabled_at).map_or(0, |b| b.timestamp_ms)),
        enabled_at_block: w.enabled_at,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PendingSubmission {
    pub tx_id: String,
    pub kind: String,
    pub model_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub case_id: Option<String>,
}

/// This node's transactions sitting in the consensus pending queue.
pub fn pending_submissions(node: &Node) -> Vec<PendingSubmission> {
    node.replica()
        .state()
        .ordering
        .pending
        .iter()
        .filter(|t| t.submitter == node.id())
        .map(|t| match &t.body {
            TxBody::ModelUpdate(m) => PendingSubmission {
                tx_id: t.id().to_hex(),
                kind: "MODEL_UPDATE".into(),
                model_id: m.model_id.clone(),
                case_id: None,
            },
            TxBody::InstanceState(s) => PendingSubmission {
                tx_id: t.id().to_hex(),
                kind: "INSTANCE_STATE".into(),
                model_id: s.model_id.clone(),
                case_id: Some(s.case_id.to_hex()),
            },
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WorklistView {
    pub work_items: Vec<WorkItemView>,
    pub pending_submissions: Vec<PendingSubmission>,
}

pub fn worklist(node: &Node) -> WorklistView {
    WorklistView {
        work_items: node.engine().worklist().into_iter().map(|w| work_item(w, node.store())).collect(),
        pending_submissions: pending_submissions(node),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaseView {
    pub case_id: String,
    pub model_id: String,
    pub status: String,
    pub marking: BTreeMap<String, u32>,
    pub data: BTreeMap<String, serde_json::Value>,
}

pub fn case(c: &CaseState) -> CaseView {
    CaseView {
        case_id: c.case_id.to_hex(),
        model_id: c.model_id.clone(),
        status: match c.status {
            CaseStatus::Running => "RUNNING",
            CaseStatus::Finished => "FINISHED",
            CaseStatus::Deadlocked => "DEADLOCKED",
        }
        .into(),
        marking: c.marking.iter().map(|(p, n)| (p.to_string(), n)).collect(),
        data: data_to_json(&c.data),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainStatus {
    pub node_id: u32,
    pub status: String,
    pub head_number: u64,
    pub head_hash: String,
    pub head_timestamp: String,
    pub pending_queue_length: usize,
    pub view_number: u64,
    pub membership: Vec<u32>,
    pub f: usize,
}

pub fn status_name(s: &NodeStatus) -> &'static str {
    match s {
        NodeStatus::Running => "READY",
        NodeStatus::Recovering => "RECOVERING",
        NodeStatus::Halted(_) => "HALTED",
    }
}

pub fn chain_status(node: &Node) -> ChainStatus {
    let head = node.store().head();
    ChainStatus {
        node_id: node.id().0,
        status: status_name(node.status()).into(),
        head_number: head.number,
        head_hash: head.hash.to_hex(),
        head_timestamp: iso(head.timestamp_ms),
        pending_queue_length: node.pending_queue_len(),
        view_number: node.replica().view(),
        membership: node.membership().members().iter().map(|m| m.0).collect(),
        f: node.membership().f(),
    }
}
