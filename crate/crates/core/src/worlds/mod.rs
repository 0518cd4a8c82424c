//! Two-world execution: partition planning, the wire protocol, the
//! trusted-world handler, and the rich-world session.

pub mod plan;
pub mod session;
pub mod ta;
pub mod wire;

pub use plan::{
    effective_boundary, estimate_ta_memory, plan_partition, PartitionPlan, PlanMode,
    SecureBudget, FIXED_RUNTIME_BYTES, MIB,
};
pub use session::{
    open_session, ChannelStats, ModelSource, Session, SessionOptions, SessionSummary,
    TrainStepOutcome, Transport,
};
pub use ta::{serve, LedgerCategory, MemoryLedger, TrustedWorld};
pub use wire::{chunk_count, wire_bytes, WorldMessage, FRAME_HEADER_LEN};
