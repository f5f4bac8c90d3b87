//! Signed message envelopes and the transports that carry them.

pub mod envelope;
pub mod sim;

pub use envelope::{Channel, FrameError, MessageKind, SignedEnvelope, MAX_FRAME};
pub use sim::{Fault, FaultPlan, SimNetwork};
