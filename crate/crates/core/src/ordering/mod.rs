//! Byzantine fault tolerant ordering of client requests into a single log.

pub mod client;
pub mod messages;
pub mod replica;
pub mod types;

pub use client::{OrderingClient, Submission, SubmissionOutcome};
pub use messages::ProtocolMessage;
pub use replica::{Mode, Output, Replica, ReplicaConfig, ReplicaEvent};
pub use types::{
    ClientRequest, ExecutionResult, Membership, MembershipError, Operation, OrderingApp, OrderingState, Outcome,
    ReplicatedState, Seq, View,
};
