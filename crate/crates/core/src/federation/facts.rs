//! What the top level knows: the latest state of every local entity, the
//! local relationship instances and the human decisions. The global
//! register is derived from these alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::events::{EntitySnapshot, RelationshipFact, SyncEvent, SyncEventKind};
use crate::entity_register::Validity;
use crate::ids::{Iid, LocalId, NodeRef};

/// A local relationship instance with both ends qualified by instance.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeRelationship {
    pub rel_name: String,
    pub source: NodeRef,
    pub target: NodeRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
}

impl NodeRelationship {
    pub fn of(iid: Iid, fact: &RelationshipFact) -> Self {
        Self {
            rel_name: fact.rel_name.clone(),
            source: NodeRef::new(iid, fact.source),
            target: NodeRef::new(iid, fact.target),
            validity: fact.validity,
        }
    }

    fn touches(&self, n: NodeRef) -> bool {
        self.source == n || self.target == n
    }

    fn rewired(&self, from: NodeRef, to: NodeRef) -> Self {
        let swap = |x: NodeRef| if x == from { to } else { x };
        Self {
            rel_name: self.rel_name.clone(),
            source: swap(self.source),
            target: swap(self.target),
            validity: self.validity,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Facts {
    #[serde(with = "crate::ids::as_pairs")]
    pub snapshots: BTreeMap<NodeRef, EntitySnapshot>,
    pub relationships: BTreeSet<NodeRelationship>,
    /// Local merges: absorbed entity to the one that kept its id.
    #[serde(with = "crate::ids::as_pairs")]
    pub local_forwards: BTreeMap<NodeRef, NodeRef>,
}

/// Human decisions, kept as constraints on the derivation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Decisions {
    pub must_link: BTreeSet<(NodeRef, NodeRef)>,
    pub cannot_link: BTreeSet<(NodeRef, NodeRef)>,
    /// Attribute overrides on the top-level view of a local entity.
    #[serde(with = "crate::ids::as_pairs")]
    pub patches: BTreeMap<NodeRef, BTreeMap<String, Option<Json>>>,
    /// Relationships kept out of the global register.
    pub excluded: BTreeSet<NodeRelationship>,
}

pub(super) fn ordered(a: NodeRef, b: NodeRef) -> (NodeRef, NodeRef) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Decisions {
    pub fn cannot(&self, a: NodeRef, b: NodeRef) -> bool {
        self.cannot_link.contains(&ordered(a, b))
    }

    /// Re-targets decisions after a local merge.
    fn rewire(&mut self, from: NodeRef, to: NodeRef) {
        let swap = |x: NodeRef| if x == from { to } else { x };
        let rewire_set = |set: &BTreeSet<(NodeRef, NodeRef)>| -> BTreeSet<(NodeRef, NodeRef)> {
            set.iter()
                .map(|(a, b)| ordered(swap(*a), swap(*b)))
                .filter(|(a, b)| a != b)
                .collect()
        };
        self.must_link = rewire_set(&self.must_link);
        self.cannot_link = rewire_set(&self.cannot_link);
        self.excluded = self
            .excluded
            .iter()
            .map(|r| r.rewired(from, to))
            .collect();
        if let Some(p) = self.patches.remove(&from) {
            let target = self.patches.entry(to).or_default();
            for (k, v) in p {
                target.entry(k).or_insert(v);
            }
        }
    }
}

impl Facts {
    /// Follows local merge forwards.
    pub fn resolve(&self, mut n: NodeRef) -> NodeRef {
        let mut hops = 0;
        while let Some(next) = self.local_forwards.get(&n) {
            n = *next;
            hops += 1;
            if hops > self.local_forwards.len() {
                break;
            }
        }
        n
    }

    /// Folds one event from instance `iid` into the fact base.
    pub(super) fn apply(&mut self, decisions: &mut Decisions, iid: Iid, event: &SyncEvent) {
        let node = |id: LocalId| NodeRef::new(iid, id);
        match &event.kind {
            SyncEventKind::EntityCreated { entity } | SyncEventKind::EntityEnlarged { entity } => {
                self.snapshots.insert(node(entity.local_id), entity.clone());
            }
            SyncEventKind::RelationshipAdded { relationship } => {
                let mut r = NodeRelationship::of(iid, relationship);
                r.source = self.resolve(r.source);
                r.target = self.resolve(r.target);
                self.relationships.insert(r);
            }
            SyncEventKind::MergePerformed { keep, absorb, entity } => {
                let (keep, absorb) = (node(*keep), node(*absorb));
                self.snapshots.remove(&absorb);
                self.snapshots.insert(keep, entity.clone());
                self.local_forwards.insert(absorb, keep);
                self.relationships = self
                    .relationships
                    .iter()
                    .filter_map(|r| {
                        let moved = r.touches(absorb);
                        let r = r.rewired(absorb, keep);
                        // Only loops the merge itself creates are dropped.
                        (!moved || r.source != r.target).then_some(r)
                    })
                    .collect();
                decisions.rewire(absorb, keep);
            }
            SyncEventKind::SplitPerformed {
                original,
                split_off,
                moved,
            } => {
                self.snapshots.insert(node(original.local_id), original.clone());
                self.snapshots.insert(node(split_off.local_id), split_off.clone());
                for (old, new) in moved {
                    self.relationships.remove(&NodeRelationship::of(iid, old));
                    self.relationships.insert(NodeRelationship::of(iid, new));
                }
            }
            SyncEventKind::EntityRetired { local_id } => {
                let n = node(*local_id);
                self.snapshots.remove(&n);
                self.relationships.retain(|r| !r.touches(n));
            }
        }
    }
}
