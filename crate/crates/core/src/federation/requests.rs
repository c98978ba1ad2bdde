use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::ids::{GlobalId, Iid, NodeRef};

use super::facts::NodeRelationship;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestId(pub u64);

impl std::fmt::Display for RequestId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "R{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RequestStatus {
    Open,
    InProgress,
    Resolved,
    Rejected,
}

impl RequestStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RequestStatus::Resolved | RequestStatus::Rejected)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub at: DateTime<Utc>,
    pub actor: String,
    pub action: String,
    pub status: RequestStatus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    /// No shared complete key, but compatible entities exist.
    PartialMatch,
    /// A shared key value with contradictory attributes.
    KeyConflict,
    /// Entities joined by a decision have become contradictory.
    InternalConflict,
    /// The attribute union violates a metamodel rule.
    RuleViolation,
    /// A relationship breaks a constraint once lifted to global entities.
    RelationshipConflict,
    /// A relationship stayed parked past its time-to-live.
    ParkedRelationship,
}

/// What a request is about. Two derivations that report the same issue
/// produce the same key, so requests are never duplicated.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct IssueKey {
    pub kind: IssueKind,
    /// Local entities whose global binding is held back.
    pub members: Vec<NodeRef>,
    /// Local entities of the candidates or conflicting global entities.
    pub related: Vec<NodeRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relationship: Option<NodeRelationship>,
}

/// Structured issue description.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueMessage {
    pub summary: String,
    pub contradictory: Vec<String>,
    pub coincident: Vec<String>,
    pub complementary: Vec<String>,
    pub relationships: Vec<String>,
}

/// Incoming data that triggered the request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestData {
    pub type_name: String,
    pub attributes: BTreeMap<String, Json>,
    pub bindings: Vec<NodeRef>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionRequest {
    pub request_id: RequestId,
    /// Global entities involved (candidates or conflicting records).
    pub ids: Vec<GlobalId>,
    pub data: RequestData,
    pub iid: Iid,
    pub message: IssueMessage,
    pub history: Vec<HistoryEntry>,
    pub issue: IssueKey,
}

impl ActionRequest {
    pub fn status(&self) -> RequestStatus {
        self.history.last().map(|h| h.status).unwrap_or(RequestStatus::Open)
    }

    /// Every local entity the request touches.
    pub fn nodes(&self) -> Vec<NodeRef> {
        let mut v: Vec<NodeRef> = self
            .issue
            .members
            .iter()
            .chain(&self.issue.related)
            .copied()
            .collect();
        if let Some(r) = &self.issue.relationship {
            v.push(r.source);
            v.push(r.target);
        }
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeEdit {
    pub node: NodeRef,
    pub attribute: String,
    /// `None` removes the attribute from the top-level view of `node`.
    pub value: Option<Json>,
}

/// Human decision on a request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    /// Bind the held-back entities to an existing global entity.
    Merge { global_id: GlobalId },
    /// Keep them apart from every candidate.
    CreateNew,
    /// Partition the involved local entities into distinct global entities.
    Split { groups: Vec<Vec<NodeRef>> },
    /// Correct attribute values as seen by the top level.
    FixAttributes { edits: Vec<AttributeEdit> },
}

impl Decision {
    pub fn label(&self) -> &'static str {
        match self {
            Decision::Merge { .. } => "merge",
            Decision::CreateNew => "create_new",
            Decision::Split { .. } => "split",
            Decision::FixAttributes { .. } => "fix_attributes",
        }
    }
}

/// Request content with ids and timestamps stripped, for comparing runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalizedRequest {
    pub issue: IssueKey,
    pub data: RequestData,
    pub message: IssueMessage,
    pub status: RequestStatus,
}

impl From<&ActionRequest> for NormalizedRequest {
    fn from(r: &ActionRequest) -> Self {
        Self {
            issue: r.issue.clone(),
            data: r.data.clone(),
            message: r.message.clone(),
            status: r.status(),
        }
    }
}
