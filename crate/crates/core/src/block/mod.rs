//! Blocks, the on-disk chain and peer synchronization.

#[allow(clippy::module_inception)]
mod block;
pub mod service;
pub mod store;
pub mod sync;

pub use block::{Block, UNHASHED_SUFFIX};
pub use service::{BlockEvents, BlockService};
pub use store::{BlockStore, ChainFailure, ChainFailureKind, ChainVerification, StoreError};
pub use sync::{BlockMessage, SyncSession, SyncStatus, FETCH_TIMEOUT_MS};
