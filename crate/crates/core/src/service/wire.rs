//! Request and response bodies exchanged between instances and clients.

use serde::{Deserialize, Serialize};

use crate::access_control::Ownership;
use crate::federation::events::SyncEvent;
use crate::federation::{Decision, PROTO_VERSION};
use crate::ids::{Iid, TOP_LEVEL_IID};
use crate::ingestion::IngestDocument;

fn proto() -> u32 {
    PROTO_VERSION
}

/// A district's events, pushed to or pulled by its parent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncMessage {
    #[serde(default = "proto")]
    pub proto_version: u32,
    pub iid: Iid,
    pub events: Vec<SyncEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    #[serde(default = "top")]
    pub parent_iid: Iid,
    pub address: String,
}

fn top() -> Iid {
    TOP_LEVEL_IID
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressUpdate {
    pub address: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionRequest {
    #[serde(default = "proto")]
    pub proto_version: u32,
    pub actor: String,
    #[serde(flatten)]
    pub decision: Decision,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRequest {
    pub actor: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnerGrant {
    pub user: String,
    pub level: Ownership,
}

/// `POST /ingest`: a pre-annotated document plus who owns it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    #[serde(flatten)]
    pub document: IngestDocument,
    #[serde(default)]
    pub owners: Vec<OwnerGrant>,
}

/// `POST /ingest/raw`: annotations come from a gazetteer rule set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawIngestRequest {
    pub document: IngestDocument,
    pub rule_set: String,
    #[serde(default)]
    pub owners: Vec<OwnerGrant>,
}
