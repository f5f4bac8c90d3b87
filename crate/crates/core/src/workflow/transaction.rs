use serde::{Deserialize, Serialize};

use super::marking::Marking;
use super::model::WorkflowModel;
use super::value::DataMap;
use crate::codec;
use crate::crypto::{Digest, KeyDirectory, KeyPair, NodeId, Signature};

/// Identifier of a workflow case.
pub type CaseId = Digest;

/// Full state snapshot of one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceState {
    pub case_id: CaseId,
    pub model_id: String,
    pub marking: Marking,
    pub data: DataMap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TxBody {
    ModelUpdate(WorkflowModel),
    InstanceState(InstanceState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxKind {
    ModelUpdate,
    InstanceState,
}

/// A workflow transaction: either a model definition or a case snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub body: TxBody,
    pub submitter: NodeId,
    pub signature: Signature,
}

impl Transaction {
    pub fn sign(body: TxBody, submitter: NodeId, keys: &KeyPair) -> Self {
        let signature = keys.sign(&codec::encode(&(&body, submitter)));
        Transaction { body, submitter, signature }
    }

    /// Digest over the canonical (body, submitter) encoding.
    pub fn id(&self) -> Digest {
        Digest::of(&(&self.body, self.submitter))
    }

    pub fn verify(&self, directory: &KeyDirectory) -> bool {
        directory.verify(self.submitter, &codec::encode(&(&self.body, self.submitter)), &self.signature)
    }

    pub fn kind(&self) -> TxKind {
        match self.body {
            TxBody::ModelUpdate(_) => TxKind::ModelUpdate,
            TxBody::InstanceState(_) => TxKind::InstanceState,
        }
    }

    pub fn instance(&self) -> Option<&InstanceState> {
        match &self.body {
            TxBody::InstanceState(s) => Some(s),
            TxBody::ModelUpdate(_) => None,
        }
    }

    pub fn model(&self) -> Option<&WorkflowModel> {
        match &self.body {
            TxBody::ModelUpdate(m) => Some(m),
            TxBody::InstanceState(_) => None,
        }
    }

    /// Whether two transactions concern the same case or the same model id.
    pub fn same_subject(&self, other: &Transaction) -> bool {
        match (&self.body, &other.body) {
            (TxBody::InstanceState(a), TxBody::InstanceState(b)) => a.case_id == b.case_id,
            (TxBody::ModelUpdate(a), TxBody::ModelUpdate(b)) => a.model_id == b.model_id,
            _ => false,
        }
    }
}
