//! Petri-net workflow models, case data and the engine that turns committed
//! blocks into case state and work items.

pub mod constraint;
pub mod engine;
pub mod marking;
pub mod model;
pub mod registry;
pub mod transaction;
pub mod value;

pub use constraint::{DataConstraint, Predicate};
pub use engine::{
    case_states_from_chain, firing_candidates, CaseState, CaseStatus, Engine, EngineEffect, EngineError,
    RejectReason, WorkItem, WorkItemId, WorkItemStatus,
};
pub use marking::Marking;
pub use model::{sequence_net, ModelBuilder, ModelDocument, ModelError, TransitionDef, VariableDecl, WorkflowModel};
pub use registry::{ExternalCallError, HostRegistry};
pub use transaction::{CaseId, InstanceState, Transaction, TxBody, TxKind};
pub use value::{DataMap, Value, ValueType};
