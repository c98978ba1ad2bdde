//! Per-instance Entity Register.
//!
//! Entities and relationship instances are kept in an embedded adjacency
//! structure with secondary indexes by type, by key value and by attribute
//! value. Every mutating operation is atomic: it runs inside a savepoint and
//! all of its effects (entities, relationships, forwarding records, emitted
//! sync events) are rolled back when it fails.

mod candidates;
mod export;
mod journal;
mod relationships;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

pub use candidates::{compare_attributes, contradictory_attributes, Candidate};
pub use export::DumpError;
pub use journal::Savepoint;
pub use relationships::{RelationshipInstance, Validity};

use crate::federation::events::{EntitySnapshot, RelationshipFact, SyncEvent, SyncEventKind};
use crate::ids::{Iid, LocalId, NodeRef};
use crate::metamodel::{
    AttributeMap, ConstraintViolation, Direction, Metamodel, MetamodelError, Value,
};
use journal::Undo;
use relationships::CheckResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelId(pub u64);

/// An occurrence of an entity in a document.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub doc_id: String,
    pub ann_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Entity {
    pub local_id: LocalId,
    pub instance_id: Iid,
    pub type_name: String,
    pub attributes: AttributeMap,
    pub provenance: BTreeSet<Mention>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegisterError {
    #[error("unknown entity type `{0}`")]
    UnknownType(String),
    #[error(transparent)]
    Validation(#[from] MetamodelError),
    #[error("attributes {given:?} do not form exactly one key of `{type_name}`")]
    NotAKey { type_name: String, given: Vec<String> },
    #[error("entity {0} does not exist")]
    UnknownEntity(LocalId),
    #[error("unknown relationship `{0}`")]
    UnknownRelationship(String),
    #[error("entities have different types: `{0}` and `{1}`")]
    TypeMismatch(String, String),
    #[error("incompatible attributes: {0:?}")]
    IncompatibleAttributes(Vec<String>),
    #[error("rule violations: {0:?}")]
    RuleViolations(Vec<ConstraintViolation>),
    #[error("key value already used by entity {0}")]
    KeyCollision(LocalId),
    #[error("`{rel_name}` expects {expected:?}, got {found:?}")]
    RelationshipTypeMismatch {
        rel_name: String,
        expected: (String, String),
        found: (String, String),
    },
    #[error("`{rel_name}` cardinality exceeded at entity {entity} ({existing} existing)")]
    CardinalityViolation {
        rel_name: String,
        entity: LocalId,
        existing: usize,
    },
    #[error("`{rel_name}` contradicts existing `{conflicting}` between {from} and {to}")]
    ContradictionViolation {
        rel_name: String,
        conflicting: String,
        from: LocalId,
        to: LocalId,
    },
    #[error("`{rel_name}` already holds in the opposite direction between {to} and {from}")]
    ReverseDirectionViolation {
        rel_name: String,
        from: LocalId,
        to: LocalId,
    },
    #[error("`{0}` requires a validity period")]
    MissingValidity(String),
    #[error("`{0}` does not take a validity period")]
    UnexpectedValidity(String),
    #[error("`{0}` validity period ends before it starts")]
    InvalidValidity(String),
    #[error("split partition does not cover every mention with two non-empty sides")]
    IncompletePartition,
    #[error("relationship {0:?} does not touch the entity being split")]
    ForeignRelationship(RelId),
    #[error("entity {0} still has mentions")]
    EntityHasMentions(LocalId),
    #[error("entity copy failed: {0}")]
    EntityCopyFailed(String),
}

impl RegisterError {
    pub fn is_relationship_violation(&self) -> bool {
        matches!(
            self,
            RegisterError::CardinalityViolation { .. }
                | RegisterError::ContradictionViolation { .. }
                | RegisterError::ReverseDirectionViolation { .. }
                | RegisterError::MissingValidity(_)
                | RegisterError::UnexpectedValidity(_)
                | RegisterError::InvalidValidity(_)
                | RegisterError::RelationshipTypeMismatch { .. }
        )
    }
}

/// Which end of a relationship the mentioned entity occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

/// A relationship carried by a mention, towards an existing local entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MentionRelationship {
    pub rel_name: String,
    pub role: Role,
    pub other: LocalId,
    #[serde(default)]
    pub validity: Option<Validity>,
}

/// Input of `upsert_from_mention`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MentionInput {
    pub type_name: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Json>,
    #[serde(default)]
    pub relationships: Vec<MentionRelationship>,
    #[serde(default)]
    pub mention: Option<Mention>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttributeClash {
    pub attribute: String,
    pub stored: Value,
    pub incoming: Value,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConflictReport {
    /// Entity the mention was matched to, when a key matched.
    pub target: Option<LocalId>,
    pub clashes: Vec<AttributeClash>,
    pub violations: Vec<ConstraintViolation>,
    /// Other entities whose keys the mention also matches.
    pub colliding: Vec<LocalId>,
    pub relationship_errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum UpsertOutcome {
    Created {
        local_id: LocalId,
    },
    Matched {
        local_id: LocalId,
    },
    Enlarged {
        local_id: LocalId,
        added_attributes: Vec<String>,
        added_relationships: Vec<RelId>,
    },
    Conflict {
        report: ConflictReport,
    },
    Ambiguous {
        candidates: Vec<Candidate>,
    },
}

impl UpsertOutcome {
    pub fn local_id(&self) -> Option<LocalId> {
        match self {
            UpsertOutcome::Created { local_id }
            | UpsertOutcome::Matched { local_id }
            | UpsertOutcome::Enlarged { local_id, .. } => Some(*local_id),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AmbiguityPolicy {
    /// Return `Ambiguous` and leave the choice to a person.
    AskUser,
    /// Create a new entity instead (batch experiments, imports).
    CreateNew,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterConfig {
    #[serde(default)]
    pub auto_create_on_ambiguous: bool,
}

/// Side of a split: the mentions and attribute values it keeps.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSide {
    pub mentions: BTreeSet<Mention>,
    pub attributes: BTreeMap<String, Json>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Stays on the original id.
    pub keep: SplitSide,
    /// Goes to a new entity.
    pub split_off: SplitSide,
    /// Relationship instances re-pointed to the new entity.
    #[serde(default)]
    pub move_relationships: Vec<RelId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MergeReport {
    pub entity: Entity,
    /// `None` when the merge was already applied.
    pub absorbed: Option<LocalId>,
    pub moved_mentions: BTreeSet<Mention>,
}

/// Record used to deep-copy an entity from another instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForeignEntity {
    pub origin: NodeRef,
    pub type_name: String,
    pub attributes: BTreeMap<String, Json>,
}

type ValueKey = (String, String, String);

#[derive(Clone, Debug)]
pub struct EntityRegister {
    iid: Iid,
    metamodel: Arc<Metamodel>,
    config: RegisterConfig,
    entities: BTreeMap<LocalId, Entity>,
    next_id: u64,
    forwards: BTreeMap<LocalId, LocalId>,
    retired: BTreeSet<LocalId>,
    relationships: BTreeMap<RelId, RelationshipInstance>,
    next_rel: u64,
    adjacency: BTreeMap<LocalId, BTreeSet<RelId>>,
    by_type: BTreeMap<String, BTreeSet<LocalId>>,
    key_index: HashMap<(String, usize, String), LocalId>,
    value_index: HashMap<ValueKey, BTreeSet<LocalId>>,
    attribute_holders: HashMap<(String, String), BTreeSet<LocalId>>,
    imports: BTreeMap<NodeRef, LocalId>,
    events: Vec<SyncEvent>,
    next_seq: u64,
    journal: Vec<Undo>,
    open_savepoints: usize,
}

impl EntityRegister {
    pub fn new(iid: Iid, metamodel: Arc<Metamodel>) -> Self {
        Self::with_config(iid, metamodel, RegisterConfig::default())
    }

    pub fn with_config(iid: Iid, metamodel: Arc<Metamodel>, config: RegisterConfig) -> Self {
        Self {
            iid,
            metamodel,
            config,
            entities: BTreeMap::new(),
            next_id: 1,
            forwards: BTreeMap::new(),
            retired: BTreeSet::new(),
            relationships: BTreeMap::new(),
            next_rel: 1,
            adjacency: BTreeMap::new(),
            by_type: BTreeMap::new(),
            key_index: HashMap::new(),
            value_index: HashMap::new(),
            attribute_holders: HashMap::new(),
            imports: BTreeMap::new(),
            events: Vec::new(),
            next_seq: 1,
            journal: Vec::new(),
            open_savepoints: 0,
        }
    }

    pub fn iid(&self) -> Iid {
        self.iid
    }

    pub fn metamodel(&self) -> &Arc<Metamodel> {
        &self.metamodel
    }

    pub fn config(&self) -> RegisterConfig {
        self.config
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entities_of_type<'a>(&'a self, type_name: &str) -> impl Iterator<Item = &'a Entity> + 'a {
        self.by_type
            .get(type_name)
            .into_iter()
            .flatten()
            .map(move |id| &self.entities[id])
    }

    pub fn relationships(&self) -> impl Iterator<Item = &RelationshipInstance> {
        self.relationships.values()
    }

    pub fn relationship(&self, id: RelId) -> Option<&RelationshipInstance> {
        self.relationships.get(&id)
    }

    /// Relationship instances touching `id`, in id order.
    pub fn relationships_of(&self, id: LocalId) -> Vec<&RelationshipInstance> {
        self.adjacency
            .get(&id)
            .into_iter()
            .flatten()
            .filter_map(|r| self.relationships.get(r))
            .collect()
    }

    pub fn events(&self) -> &[SyncEvent] {
        &self.events
    }

    pub fn events_after(&self, watermark: u64) -> &[SyncEvent] {
        let start = self.events.partition_point(|e| e.seq <= watermark);
        &self.events[start..]
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    pub fn forwards(&self) -> &BTreeMap<LocalId, LocalId> {
        &self.forwards
    }

    /// Follows forwarding records left by merges.
    pub fn resolve(&self, id: LocalId) -> Result<LocalId, RegisterError> {
        let mut cur = id;
        let mut hops = 0;
        while let Some(next) = self.forwards.get(&cur) {
            cur = *next;
            hops += 1;
            if hops > self.forwards.len() {
                break;
            }
        }
        if self.entities.contains_key(&cur) {
            Ok(cur)
        } else {
            Err(RegisterError::UnknownEntity(id))
        }
    }

    pub fn get(&self, id: LocalId) -> Option<&Entity> {
        self.resolve(id).ok().and_then(|id| self.entities.get(&id))
    }

    fn live(&self, id: LocalId) -> Result<&Entity, RegisterError> {
        self.entities.get(&id).ok_or(RegisterError::UnknownEntity(id))
    }

    fn is_bidirectional(&self, rel_name: &str) -> bool {
        self.metamodel
            .relationship(rel_name)
            .is_some_and(|d| d.direction == Direction::Bidirectional)
    }

    /// First complete key of an entity, as attribute names.
    pub fn key_used(&self, entity: &Entity) -> Option<Vec<String>> {
        let t = self.metamodel.entity_type(&entity.type_name)?;
        t.complete_keys(&entity.attributes)
            .next()
            .map(|(_, k)| k.iter().cloned().collect())
    }

    pub fn snapshot(&self, id: LocalId) -> Option<EntitySnapshot> {
        self.get(id).map(|e| EntitySnapshot::of(e, self.key_used(e)))
    }

    // ---- lookups -------------------------------------------------------

    /// Looks an entity up by the values of exactly one declared key.
    pub fn lookup_by_identifier(
        &self,
        type_name: &str,
        key_values: &BTreeMap<String, Json>,
    ) -> Result<Option<&Entity>, RegisterError> {
        let t = self
            .metamodel
            .entity_type(type_name)
            .ok_or_else(|| RegisterError::UnknownType(type_name.to_string()))?;
        let given: BTreeSet<String> = key_values.keys().cloned().collect();
        let Some(key_idx) = t.keys.iter().position(|k| *k == given) else {
            return Err(RegisterError::NotAKey {
                type_name: type_name.to_string(),
                given: given.into_iter().collect(),
            });
        };
        let values = self.metamodel.validate_attributes(type_name, key_values)?;
        let key_string = key_string(&t.keys[key_idx], &values);
        Ok(self
            .key_index
            .get(&(type_name.to_string(), key_idx, key_string))
            .and_then(|id| self.entities.get(id)))
    }

    /// Entities holding the full value of any complete key in `attributes`.
    fn key_matches(&self, type_name: &str, attributes: &AttributeMap) -> BTreeSet<LocalId> {
        let Some(t) = self.metamodel.entity_type(type_name) else {
            return BTreeSet::new();
        };
        t.complete_keys(attributes)
            .filter_map(|(idx, key)| {
                self.key_index
                    .get(&(type_name.to_string(), idx, key_string(key, attributes)))
                    .copied()
            })
            .collect()
    }

    // ---- upsert -------------------------------------------------------

    /// Mention-driven upsert: exact key lookup when a complete key is
    /// present, candidate search otherwise.
    pub fn upsert_from_mention(&mut self, input: &MentionInput) -> Result<UpsertOutcome, RegisterError> {
        let policy = if self.config.auto_create_on_ambiguous {
            AmbiguityPolicy::CreateNew
        } else {
            AmbiguityPolicy::AskUser
        };
        self.upsert_with(input, policy)
    }

    pub fn upsert_with(
        &mut self,
        input: &MentionInput,
        policy: AmbiguityPolicy,
    ) -> Result<UpsertOutcome, RegisterError> {
        let attributes = self.prepare(input)?;
        let attributes = match self.fold_rules(&input.type_name, attributes) {
            Ok(a) => a,
            Err(violations) => {
                return Ok(UpsertOutcome::Conflict {
                    report: ConflictReport {
                        violations,
                        ..Default::default()
                    },
                })
            }
        };
        let t = self.metamodel.require_type(&input.type_name)?;
        let has_complete_key = t.complete_keys(&attributes).next().is_some();

        if has_complete_key {
            let matches = self.key_matches(&input.type_name, &attributes);
            return match matches.len() {
                0 => self.atomically(|reg| reg.create_entity(input, attributes)),
                1 => {
                    let target = *matches.iter().next().unwrap();
                    self.atomically(|reg| reg.enlarge_entity(target, input, attributes))
                }
                _ => Ok(UpsertOutcome::Conflict {
                    report: ConflictReport {
                        colliding: matches.into_iter().collect(),
                        ..Default::default()
                    },
                }),
            };
        }

        let candidates: Vec<Candidate> = self
            .find_candidates(&input.type_name, &attributes, &input.relationships)
            .into_iter()
            .filter(|c| c.equal_values > 0 || c.shared_endpoints > 0)
            .collect();
        if candidates.is_empty() || policy == AmbiguityPolicy::CreateNew {
            self.atomically(|reg| reg.create_entity(input, attributes))
        } else {
            Ok(UpsertOutcome::Ambiguous { candidates })
        }
    }

    /// Attaches a mention to a chosen entity after an ambiguous upsert.
    pub fn attach_mention(
        &mut self,
        target: LocalId,
        input: &MentionInput,
    ) -> Result<UpsertOutcome, RegisterError> {
        let target = self.resolve(target)?;
        let attributes = self.prepare(input)?;
        let attributes = match self.fold_rules(&input.type_name, attributes) {
            Ok(a) => a,
            Err(violations) => {
                return Ok(UpsertOutcome::Conflict {
                    report: ConflictReport {
                        target: Some(target),
                        violations,
                        ..Default::default()
                    },
                })
            }
        };
        let found = self.live(target)?.type_name.clone();
        if found != input.type_name {
            return Err(RegisterError::TypeMismatch(found, input.type_name.clone()));
        }
        self.atomically(|reg| reg.enlarge_entity(target, input, attributes))
    }

    /// Creates a new entity even though candidates exist.
    pub fn create_from_mention(&mut self, input: &MentionInput) -> Result<UpsertOutcome, RegisterError> {
        let attributes = self.prepare(input)?;
        let attributes = match self.fold_rules(&input.type_name, attributes) {
            Ok(a) => a,
            Err(violations) => {
                return Ok(UpsertOutcome::Conflict {
                    report: ConflictReport {
                        violations,
                        ..Default::default()
                    },
                })
            }
        };
        let matches = self.key_matches(&input.type_name, &attributes);
        if !matches.is_empty() {
            return Ok(UpsertOutcome::Conflict {
                report: ConflictReport {
                    colliding: matches.into_iter().collect(),
                    ..Default::default()
                },
            });
        }
        self.atomically(|reg| reg.create_entity(input, attributes))
    }

    fn prepare(&self, input: &MentionInput) -> Result<AttributeMap, RegisterError> {
        if self.metamodel.entity_type(&input.type_name).is_none() {
            return Err(RegisterError::UnknownType(input.type_name.clone()));
        }
        let attributes = self
            .metamodel
            .validate_attributes(&input.type_name, &input.attributes)?;
        for r in &input.relationships {
            if self.metamodel.relationship(&r.rel_name).is_none() {
                return Err(RegisterError::UnknownRelationship(r.rel_name.clone()));
            }
            self.resolve(r.other)?;
        }
        Ok(attributes)
    }

    fn fold_rules(
        &self,
        type_name: &str,
        mut attributes: AttributeMap,
    ) -> Result<AttributeMap, Vec<ConstraintViolation>> {
        let outcome = self.metamodel.apply_rules(type_name, &attributes);
        if !outcome.is_clean() {
            return Err(outcome.violations);
        }
        attributes.extend(outcome.derived);
        Ok(attributes)
    }

    /// Runs `f` inside a savepoint; rolls back on errors and on conflicts.
    fn atomically(
        &mut self,
        f: impl FnOnce(&mut Self) -> Result<UpsertOutcome, RegisterError>,
    ) -> Result<UpsertOutcome, RegisterError> {
        let sp = self.savepoint();
        match f(self) {
            Ok(UpsertOutcome::Conflict { report }) => {
                self.rollback_to(sp);
                Ok(UpsertOutcome::Conflict { report })
            }
            Ok(outcome) => {
                self.release(sp);
                Ok(outcome)
            }
            Err(e) => {
                self.rollback_to(sp);
                Err(e)
            }
        }
    }

    fn create_entity(
        &mut self,
        input: &MentionInput,
        attributes: AttributeMap,
    ) -> Result<UpsertOutcome, RegisterError> {
        let local_id = LocalId(self.next_id);
        self.next_id += 1;
        self.journal.push(Undo::NextId(local_id.0));
        let entity = Entity {
            local_id,
            instance_id: self.iid,
            type_name: input.type_name.clone(),
            attributes,
            provenance: input.mention.iter().cloned().collect(),
        };
        self.insert_entity(entity);
        let snapshot = self.snapshot(local_id).expect("just inserted");
        self.push_event(SyncEventKind::EntityCreated { entity: snapshot });
        match self.add_mention_relationships(local_id, &input.relationships) {
            Ok(_) => Ok(UpsertOutcome::Created { local_id }),
            Err(report) => Ok(UpsertOutcome::Conflict { report }),
        }
    }

    fn enlarge_entity(
        &mut self,
        target: LocalId,
        input: &MentionInput,
        attributes: AttributeMap,
    ) -> Result<UpsertOutcome, RegisterError> {
        let existing = self.live(target)?.clone();
        let clashes: Vec<AttributeClash> = contradictory_attributes(&existing.attributes, &attributes)
            .into_iter()
            .map(|name| AttributeClash {
                stored: existing.attributes[&name].clone(),
                incoming: attributes[&name].clone(),
                attribute: name,
            })
            .collect();
        if !clashes.is_empty() {
            return Ok(UpsertOutcome::Conflict {
                report: ConflictReport {
                    target: Some(target),
                    clashes,
                    ..Default::default()
                },
            });
        }
        let mut merged = existing.attributes.clone();
        let mut added = Vec::new();
        for (name, value) in attributes {
            match merged.get(&name) {
                None => {
                    added.push(name.clone());
                    merged.insert(name, value);
                }
                Some(old @ Value::List(_)) => {
                    let union = old.union(&value);
                    if !union.same_as(old) {
                        added.push(name.clone());
                    }
                    merged.insert(name, union);
                }
                Some(_) => {}
            }
        }
        let outcome = self.metamodel.apply_rules(&existing.type_name, &merged);
        if !outcome.is_clean() {
            return Ok(UpsertOutcome::Conflict {
                report: ConflictReport {
                    target: Some(target),
                    violations: outcome.violations,
                    ..Default::default()
                },
            });
        }
        for (name, value) in outcome.derived {
            added.push(name.clone());
            merged.insert(name, value);
        }
        let colliding: Vec<LocalId> = self
            .key_matches(&existing.type_name, &merged)
            .into_iter()
            .filter(|id| *id != target)
            .collect();
        if !colliding.is_empty() {
            return Ok(UpsertOutcome::Conflict {
                report: ConflictReport {
                    target: Some(target),
                    colliding,
                    ..Default::default()
                },
            });
        }

        let mut updated = existing;
        updated.attributes = merged;
        if let Some(m) = &input.mention {
            updated.provenance.insert(m.clone());
        }
        self.replace_entity(updated);
        added.sort();
        if !added.is_empty() {
            let snapshot = self.snapshot(target).expect("live");
            self.push_event(SyncEventKind::EntityEnlarged { entity: snapshot });
        }
        let added_relationships = match self.add_mention_relationships(target, &input.relationships) {
            Ok(r) => r,
            Err(report) => return Ok(UpsertOutcome::Conflict { report }),
        };
        if added.is_empty() && added_relationships.is_empty() {
            Ok(UpsertOutcome::Matched { local_id: target })
        } else {
            Ok(UpsertOutcome::Enlarged {
                local_id: target,
                added_attributes: added,
                added_relationships,
            })
        }
    }

    fn add_mention_relationships(
        &mut self,
        id: LocalId,
        relationships: &[MentionRelationship],
    ) -> Result<Vec<RelId>, ConflictReport> {
        let mut added = Vec::new();
        for r in relationships {
            let other = self.resolve(r.other).map_err(|e| ConflictReport {
                target: Some(id),
                relationship_errors: vec![e.to_string()],
                ..Default::default()
            })?;
            let (source, target) = match r.role {
                Role::Source => (id, other),
                Role::Target => (other, id),
            };
            let before = self.relationships.len();
            match self.insert_relationship(&r.rel_name, source, target, r.validity) {
                Ok(rel_id) => {
                    if self.relationships.len() > before {
                        added.push(rel_id);
                    }
                }
                Err(e) => {
                    return Err(ConflictReport {
                        target: Some(id),
                        relationship_errors: vec![e.to_string()],
                        ..Default::default()
                    })
                }
            }
        }
        Ok(added)
    }

    // ---- relationships -------------------------------------------------

    /// Stores a relationship instance after checking direction, cardinality,
    /// validity and contradiction constraints. Re-adding an identical
    /// instance returns its existing id.
    pub fn add_relationship(
        &mut self,
        rel_name: &str,
        source: LocalId,
        target: LocalId,
        validity: Option<Validity>,
    ) -> Result<RelId, RegisterError> {
        let sp = self.savepoint();
        match self.insert_relationship(rel_name, source, target, validity) {
            Ok(id) => {
                self.release(sp);
                Ok(id)
            }
            Err(e) => {
                self.rollback_to(sp);
                Err(e)
            }
        }
    }

    fn insert_relationship(
        &mut self,
        rel_name: &str,
        source: LocalId,
        target: LocalId,
        validity: Option<Validity>,
    ) -> Result<RelId, RegisterError> {
        let def = self
            .metamodel
            .relationship(rel_name)
            .ok_or_else(|| RegisterError::UnknownRelationship(rel_name.to_string()))?
            .clone();
        let source = self.resolve(source)?;
        let target = self.resolve(target)?;
        match self.check_relationship(&def, source, target, validity)? {
            CheckResult::Duplicate(id) => Ok(id),
            CheckResult::Accept => {
                let id = RelId(self.next_rel);
                self.next_rel += 1;
                self.journal.push(Undo::NextRel(id.0));
                self.insert_rel(RelationshipInstance {
                    id,
                    rel_name: rel_name.to_string(),
                    source,
                    target,
                    validity,
                });
                self.push_event(SyncEventKind::RelationshipAdded {
                    relationship: RelationshipFact {
                        rel_name: rel_name.to_string(),
                        source,
                        target,
                        validity,
                    },
                });
                Ok(id)
            }
        }
    }

    /// Re-validates every stored instance from scratch; used by audits.
    pub fn audit_relationships(&self) -> Vec<(RelId, RegisterError)> {
        let mut scratch = EntityRegister::new(self.iid, self.metamodel.clone());
        for e in self.entities.values() {
            scratch.insert_entity(e.clone());
        }
        let mut failures = Vec::new();
        for r in self.relationships.values() {
            if let Err(e) = scratch.insert_relationship(&r.rel_name, r.source, r.target, r.validity) {
                failures.push((r.id, e));
            }
        }
        failures
    }

    // ---- merge / split -------------------------------------------------

    /// Merges `absorb` into `keep`. The absorbed id is retired with a
    /// forwarding record; re-merging an already merged pair is a no-op.
    pub fn merge_entities(&mut self, keep: LocalId, absorb: LocalId) -> Result<MergeReport, RegisterError> {
        let keep = self.resolve(keep)?;
        let absorb_live = self.resolve(absorb)?;
        if absorb_live == keep {
            return Ok(MergeReport {
                entity: self.entities[&keep].clone(),
                absorbed: None,
                moved_mentions: BTreeSet::new(),
            });
        }
        let absorb = absorb_live;
        let sp = self.savepoint();
        match self.merge_inner(keep, absorb) {
            Ok(r) => {
                self.release(sp);
                Ok(r)
            }
            Err(e) => {
                self.rollback_to(sp);
                Err(e)
            }
        }
    }

    fn merge_inner(&mut self, keep: LocalId, absorb: LocalId) -> Result<MergeReport, RegisterError> {
        let a = self.live(keep)?.clone();
        let b = self.live(absorb)?.clone();
        if a.type_name != b.type_name {
            return Err(RegisterError::TypeMismatch(a.type_name, b.type_name));
        }
        let clashes = contradictory_attributes(&a.attributes, &b.attributes);
        if !clashes.is_empty() {
            return Err(RegisterError::IncompatibleAttributes(clashes));
        }
        let mut attributes = a.attributes.clone();
        for (k, v) in &b.attributes {
            let merged = match attributes.get(k) {
                Some(existing) => existing.union(v),
                None => v.clone(),
            };
            attributes.insert(k.clone(), merged);
        }
        let outcome = self.metamodel.apply_rules(&a.type_name, &attributes);
        if !outcome.is_clean() {
            return Err(RegisterError::RuleViolations(outcome.violations));
        }
        attributes.extend(outcome.derived);

        let moved_rels: Vec<RelationshipInstance> =
            self.relationships_of(absorb).into_iter().cloned().collect();
        for r in &moved_rels {
            self.remove_rel(r.id);
        }
        self.remove_entity(absorb);
        self.set_forward(absorb, keep);

        if let Some(other) = self
            .key_matches(&a.type_name, &attributes)
            .into_iter()
            .find(|id| *id != keep)
        {
            return Err(RegisterError::KeyCollision(other));
        }
        let mut merged = a;
        merged.attributes = attributes;
        merged.provenance.extend(b.provenance.iter().cloned());
        self.replace_entity(merged);

        for r in moved_rels {
            let source = if r.source == absorb { keep } else { r.source };
            let target = if r.target == absorb { keep } else { r.target };
            if source == target {
                continue;
            }
            self.check_and_insert_silently(&r.rel_name, source, target, r.validity)?;
        }
        let snapshot = self.snapshot(keep).expect("live");
        self.push_event(SyncEventKind::MergePerformed {
            keep,
            absorb,
            entity: snapshot,
        });
        Ok(MergeReport {
            entity: self.entities[&keep].clone(),
            absorbed: Some(absorb),
            moved_mentions: b.provenance,
        })
    }

    /// Inserts a relationship without emitting `RelationshipAdded`; used when
    /// the enclosing event already describes the change.
    fn check_and_insert_silently(
        &mut self,
        rel_name: &str,
        source: LocalId,
        target: LocalId,
        validity: Option<Validity>,
    ) -> Result<RelId, RegisterError> {
        let def = self
            .metamodel
            .relationship(rel_name)
            .ok_or_else(|| RegisterError::UnknownRelationship(rel_name.to_string()))?
            .clone();
        match self.check_relationship(&def, source, target, validity)? {
            CheckResult::Duplicate(id) => Ok(id),
            CheckResult::Accept => {
                let id = RelId(self.next_rel);
                self.next_rel += 1;
                self.journal.push(Undo::NextRel(id.0));
                self.insert_rel(RelationshipInstance {
                    id,
                    rel_name: rel_name.to_string(),
                    source,
                    target,
                    validity,
                });
                Ok(id)
            }
        }
    }

    /// Splits one entity in two according to a mention partition and
    /// explicit attribute assignments. The original id keeps `plan.keep`.
    pub fn split_entity(&mut self, id: LocalId, plan: &SplitPlan) -> Result<(Entity, Entity), RegisterError> {
        let id = self.resolve(id)?;
        let sp = self.savepoint();
        match self.split_inner(id, plan) {
            Ok(r) => {
                self.release(sp);
                Ok(r)
            }
            Err(e) => {
                self.rollback_to(sp);
                Err(e)
            }
        }
    }

    fn split_inner(&mut self, id: LocalId, plan: &SplitPlan) -> Result<(Entity, Entity), RegisterError> {
        let original = self.live(id)?.clone();
        let keep = &plan.keep.mentions;
        let off = &plan.split_off.mentions;
        let covered: BTreeSet<&Mention> = keep.iter().chain(off.iter()).collect();
        let exact_cover = covered.len() == original.provenance.len()
            && original.provenance.iter().all(|m| covered.contains(m));
        if keep.is_empty() || off.is_empty() || !keep.is_disjoint(off) || !exact_cover {
            return Err(RegisterError::IncompletePartition);
        }
        let type_name = original.type_name.clone();
        let keep_attrs = self.validated_with_rules(&type_name, &plan.keep.attributes)?;
        let off_attrs = self.validated_with_rules(&type_name, &plan.split_off.attributes)?;
        for rel in &plan.move_relationships {
            let r = self
                .relationships
                .get(rel)
                .ok_or(RegisterError::ForeignRelationship(*rel))?;
            if r.source != id && r.target != id {
                return Err(RegisterError::ForeignRelationship(*rel));
            }
        }

        let mut kept = original.clone();
        kept.attributes = keep_attrs;
        kept.provenance = keep.clone();
        self.replace_entity(kept);

        let new_id = LocalId(self.next_id);
        self.next_id += 1;
        self.journal.push(Undo::NextId(new_id.0));
        self.insert_entity(Entity {
            local_id: new_id,
            instance_id: self.iid,
            type_name: type_name.clone(),
            attributes: off_attrs,
            provenance: off.clone(),
        });
        for (entity, attrs) in [(id, &self.entities[&id].attributes), (new_id, &self.entities[&new_id].attributes)] {
            if let Some(other) = self
                .key_matches(&type_name, attrs)
                .into_iter()
                .find(|o| *o != entity)
            {
                return Err(RegisterError::KeyCollision(other));
            }
        }

        let mut moved = Vec::new();
        for rel in &plan.move_relationships {
            let r = self.relationships[rel].clone();
            self.remove_rel(r.id);
            let source = if r.source == id { new_id } else { r.source };
            let target = if r.target == id { new_id } else { r.target };
            self.check_and_insert_silently(&r.rel_name, source, target, r.validity)?;
            moved.push((
                RelationshipFact {
                    rel_name: r.rel_name.clone(),
                    source: r.source,
                    target: r.target,
                    validity: r.validity,
                },
                RelationshipFact {
                    rel_name: r.rel_name,
                    source,
                    target,
                    validity: r.validity,
                },
            ));
        }
        let original_snapshot = self.snapshot(id).expect("live");
        let split_snapshot = self.snapshot(new_id).expect("live");
        self.push_event(SyncEventKind::SplitPerformed {
            original: original_snapshot,
            split_off: split_snapshot,
            moved,
        });
        Ok((self.entities[&id].clone(), self.entities[&new_id].clone()))
    }

    fn validated_with_rules(
        &self,
        type_name: &str,
        raw: &BTreeMap<String, Json>,
    ) -> Result<AttributeMap, RegisterError> {
        let attrs = self.metamodel.validate_attributes(type_name, raw)?;
        self.fold_rules(type_name, attrs)
            .map_err(RegisterError::RuleViolations)
    }

    // ---- import / delete / provenance -------------------------------------

    /// Deep-copies an entity from another instance. Copies are idempotent
    /// per origin, and a key match reuses the local entity.
    pub fn import_entity(&mut self, record: &ForeignEntity) -> Result<LocalId, RegisterError> {
        if let Some(id) = self.imports.get(&record.origin) {
            if let Ok(live) = self.resolve(*id) {
                return Ok(live);
            }
        }
        let input = MentionInput {
            type_name: record.type_name.clone(),
            attributes: record.attributes.clone(),
            relationships: vec![],
            mention: None,
        };
        match self.upsert_with(&input, AmbiguityPolicy::CreateNew)? {
            UpsertOutcome::Conflict { report } => Err(RegisterError::EntityCopyFailed(format!(
                "{:?}",
                report
            ))),
            outcome => {
                let id = outcome.local_id().expect("non-conflict outcomes carry an id");
                let prev = self.imports.insert(record.origin, id);
                self.journal.push(Undo::Import(record.origin, prev));
                self.maybe_clear_journal();
                Ok(id)
            }
        }
    }

    pub fn add_mention(&mut self, id: LocalId, mention: Mention) -> Result<(), RegisterError> {
        let id = self.resolve(id)?;
        let mut e = self.entities[&id].clone();
        if e.provenance.insert(mention) {
            self.replace_entity(e);
            self.maybe_clear_journal();
        }
        Ok(())
    }

    pub fn remove_mention(&mut self, id: LocalId, mention: &Mention) -> Result<(), RegisterError> {
        let id = self.resolve(id)?;
        let mut e = self.entities[&id].clone();
        if e.provenance.remove(mention) {
            self.replace_entity(e);
            self.maybe_clear_journal();
        }
        Ok(())
    }

    /// Deletes an entity that has no mentions; its relationships go too.
    pub fn delete_entity(&mut self, id: LocalId) -> Result<(), RegisterError> {
        let id = self.resolve(id)?;
        if !self.entities[&id].provenance.is_empty() {
            return Err(RegisterError::EntityHasMentions(id));
        }
        let rels: Vec<RelId> = self.relationships_of(id).iter().map(|r| r.id).collect();
        for r in rels {
            self.remove_rel(r);
        }
        self.remove_entity(id);
        self.retired.insert(id);
        self.journal.push(Undo::Retired(id));
        self.push_event(SyncEventKind::EntityRetired { local_id: id });
        self.maybe_clear_journal();
        Ok(())
    }

    // ---- low-level mutation primitives (journaled) ----------------------

    fn insert_entity(&mut self, entity: Entity) {
        let id = entity.local_id;
        self.index_entity(&entity);
        self.entities.insert(id, entity);
        self.journal.push(Undo::Inserted(id));
    }

    fn replace_entity(&mut self, entity: Entity) {
        let id = entity.local_id;
        let old = self.entities.remove(&id).expect("replace of live entity");
        self.unindex_entity(&old);
        self.index_entity(&entity);
        self.entities.insert(id, entity);
        self.journal.push(Undo::Replaced(Box::new(old)));
    }

    fn remove_entity(&mut self, id: LocalId) {
        if let Some(old) = self.entities.remove(&id) {
            self.unindex_entity(&old);
            self.journal.push(Undo::Removed(Box::new(old)));
        }
    }

    fn insert_rel(&mut self, rel: RelationshipInstance) {
        self.adjacency.entry(rel.source).or_default().insert(rel.id);
        self.adjacency.entry(rel.target).or_default().insert(rel.id);
        self.journal.push(Undo::RelInserted(rel.id));
        self.relationships.insert(rel.id, rel);
    }

    fn remove_rel(&mut self, id: RelId) {
        if let Some(rel) = self.relationships.remove(&id) {
            for end in [rel.source, rel.target] {
                if let Some(set) = self.adjacency.get_mut(&end) {
                    set.remove(&id);
                    if set.is_empty() {
                        self.adjacency.remove(&end);
                    }
                }
            }
            self.journal.push(Undo::RelRemoved(rel));
        }
    }

    fn set_forward(&mut self, from: LocalId, to: LocalId) {
        let prev = self.forwards.insert(from, to);
        self.journal.push(Undo::Forward(from, prev));
    }

    fn push_event(&mut self, kind: SyncEventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.events.push(SyncEvent { seq, kind });
        self.journal.push(Undo::Event);
    }

    fn index_entity(&mut self, e: &Entity) {
        let type_name = e.type_name.clone();
        self.by_type.entry(type_name.clone()).or_default().insert(e.local_id);
        if let Some(t) = self.metamodel.entity_type(&type_name) {
            for (idx, key) in t.complete_keys(&e.attributes) {
                self.key_index
                    .insert((type_name.clone(), idx, key_string(key, &e.attributes)), e.local_id);
            }
        }
        for (attr, value) in &e.attributes {
            self.attribute_holders
                .entry((type_name.clone(), attr.clone()))
                .or_default()
                .insert(e.local_id);
            for key in value_keys(value) {
                self.value_index
                    .entry((type_name.clone(), attr.clone(), key))
                    .or_default()
                    .insert(e.local_id);
            }
        }
    }

    fn unindex_entity(&mut self, e: &Entity) {
        let type_name = e.type_name.clone();
        if let Some(set) = self.by_type.get_mut(&type_name) {
            set.remove(&e.local_id);
        }
        if let Some(t) = self.metamodel.entity_type(&type_name) {
            for (idx, key) in t.complete_keys(&e.attributes) {
                let k = (type_name.clone(), idx, key_string(key, &e.attributes));
                if self.key_index.get(&k) == Some(&e.local_id) {
                    self.key_index.remove(&k);
                }
            }
        }
        for (attr, value) in &e.attributes {
            if let Some(set) = self.attribute_holders.get_mut(&(type_name.clone(), attr.clone())) {
                set.remove(&e.local_id);
            }
            for key in value_keys(value) {
                let k = (type_name.clone(), attr.clone(), key);
                if let Some(set) = self.value_index.get_mut(&k) {
                    set.remove(&e.local_id);
                    if set.is_empty() {
                        self.value_index.remove(&k);
                    }
                }
            }
        }
    }
}

pub(crate) fn key_string(key: &BTreeSet<String>, attributes: &AttributeMap) -> String {
    key.iter()
        .map(|a| attributes.get(a).map(Value::index_key).unwrap_or_default())
        .collect::<Vec<_>>()
        .join("\u{1e}")
}

fn value_keys(value: &Value) -> Vec<String> {
    match value {
        Value::List(items) => items.iter().map(|s| crate::metamodel::fold(s)).collect(),
        other => vec![other.index_key()],
    }
}

#[cfg(test)]
mod tests;
