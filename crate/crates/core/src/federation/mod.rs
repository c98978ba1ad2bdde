//! Federation between district instances and the top level.

mod directory;
pub mod events;
mod facts;
mod requests;
mod resolve;
mod top_level;
mod wal;

use thiserror::Error;

pub use directory::{InstanceDirectory, InstanceRecord};
pub use facts::{Decisions, Facts, NodeRelationship};
pub use requests::{
    ActionRequest, AttributeEdit, Decision, HistoryEntry, IssueKey, IssueKind, IssueMessage, NormalizedRequest,
    RequestData, RequestId, RequestStatus,
};
pub use resolve::{GlobalBinding, GlobalEntity, GlobalRelationship};
pub use top_level::{
    CanonicalEntity, CanonicalState, EventOutcome, EventSource, Resolution, SyncOutcome, SyncReport, TopLevel,
    TopLevelConfig,
};
pub use wal::Wal;

use crate::ids::{GlobalId, Iid};

/// Version of the sync wire messages.
pub const PROTO_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FederationError {
    #[error("unknown parent instance {0}")]
    UnknownParent(Iid),
    #[error("top level unreachable: {0}")]
    TopLevelUnreachable(String),
    #[error("unknown instance {0}")]
    UnknownInstance(Iid),
    #[error("event does not fit the metamodel: {0}")]
    MetamodelMismatch(String),
    #[error("instance {iid} sent seq {got}, expected {expected}")]
    SeqGap { iid: Iid, expected: u64, got: u64 },
    #[error("unknown action request {0}")]
    UnknownRequest(u64),
    #[error("action request {0} is already resolved")]
    AlreadyResolved(u64),
    #[error("actor `{0}` may not resolve action requests")]
    UnauthorizedActor(String),
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("unknown global entity {0}")]
    UnknownGlobalEntity(GlobalId),
    #[error("unsupported protocol version {0}")]
    ProtocolVersion(u32),
    #[error("i/o: {0}")]
    Io(String),
    #[error("log line {line}: {message}")]
    Wal { line: usize, message: String },
}
