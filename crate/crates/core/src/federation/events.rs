//! Sync events emitted by district registers and consumed by the top level.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::entity_register::{Entity, Validity};
use crate::ids::LocalId;

/// Full attribute state of a local entity at the time of the event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntitySnapshot {
    pub local_id: LocalId,
    pub type_name: String,
    pub attributes: BTreeMap<String, Json>,
    /// First complete key of the entity, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_used: Option<Vec<String>>,
}

impl EntitySnapshot {
    pub fn of(entity: &Entity, key_used: Option<Vec<String>>) -> Self {
        Self {
            local_id: entity.local_id,
            type_name: entity.type_name.clone(),
            attributes: entity
                .attributes
                .iter()
                .map(|(k, v)| (k.clone(), v.to_json()))
                .collect(),
            key_used,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationshipFact {
    pub rel_name: String,
    pub source: LocalId,
    pub target: LocalId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SyncEventKind {
    EntityCreated {
        entity: EntitySnapshot,
    },
    EntityEnlarged {
        entity: EntitySnapshot,
    },
    RelationshipAdded {
        relationship: RelationshipFact,
    },
    /// `absorb` is retired locally; `entity` is the merged state of `keep`.
    MergePerformed {
        keep: LocalId,
        absorb: LocalId,
        entity: EntitySnapshot,
    },
    SplitPerformed {
        original: EntitySnapshot,
        split_off: EntitySnapshot,
        /// Relationship instances re-pointed from the original to the split-off entity.
        moved: Vec<(RelationshipFact, RelationshipFact)>,
    },
    /// The entity was deleted locally (only possible without mentions).
    EntityRetired {
        local_id: LocalId,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncEvent {
    /// Strictly increasing per instance, starting at 1.
    pub seq: u64,
    #[serde(flatten)]
    pub kind: SyncEventKind,
}

impl SyncEvent {
    /// Local entities whose state this event describes.
    pub fn subjects(&self) -> Vec<LocalId> {
        match &self.kind {
            SyncEventKind::EntityCreated { entity } | SyncEventKind::EntityEnlarged { entity } => {
                vec![entity.local_id]
            }
            SyncEventKind::RelationshipAdded { relationship } => {
                vec![relationship.source, relationship.target]
            }
            SyncEventKind::MergePerformed { keep, absorb, .. } => vec![*keep, *absorb],
            SyncEventKind::SplitPerformed {
                original,
                split_off,
                ..
            } => vec![original.local_id, split_off.local_id],
            SyncEventKind::EntityRetired { local_id } => vec![*local_id],
        }
    }
}
