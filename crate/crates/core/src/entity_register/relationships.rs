use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{EntityRegister, RegisterError, RelId};
use crate::ids::LocalId;
use crate::metamodel::{Direction, RelationshipDef};

/// Half-open validity period `[start, end)`; an open end means still valid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Validity {
    pub start: NaiveDate,
    #[serde(default)]
    pub end: Option<NaiveDate>,
}

impl Validity {
    pub fn new(start: NaiveDate, end: Option<NaiveDate>) -> Self {
        Self { start, end }
    }

    pub fn overlaps(&self, other: &Validity) -> bool {
        let starts_before_other_ends = other.end.is_none_or(|e| self.start < e);
        let other_starts_before_end = self.end.is_none_or(|e| other.start < e);
        starts_before_other_ends && other_starts_before_end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RelationshipInstance {
    pub id: RelId,
    pub rel_name: String,
    pub source: LocalId,
    pub target: LocalId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
}

impl RelationshipInstance {
    /// The far end when seen from `id`, honouring bidirectional storage.
    pub fn other_end(&self, id: LocalId, bidirectional: bool) -> Option<LocalId> {
        if self.source == id {
            Some(self.target)
        } else if bidirectional && self.target == id {
            Some(self.source)
        } else {
            None
        }
    }

    fn connects(&self, a: LocalId, b: LocalId, bidirectional: bool) -> bool {
        (self.source == a && self.target == b) || (bidirectional && self.source == b && self.target == a)
    }
}

pub(super) enum CheckResult {
    /// An identical instance already exists.
    Duplicate(RelId),
    Accept,
}

impl EntityRegister {
    /// Checks every metamodel constraint for a prospective instance.
    pub(super) fn check_relationship(
        &self,
        def: &RelationshipDef,
        source: LocalId,
        target: LocalId,
        validity: Option<Validity>,
    ) -> Result<CheckResult, RegisterError> {
        let src = self.live(source)?;
        let tgt = self.live(target)?;
        if src.type_name != def.source_type || tgt.type_name != def.target_type {
            return Err(RegisterError::RelationshipTypeMismatch {
                rel_name: def.name.clone(),
                expected: (def.source_type.clone(), def.target_type.clone()),
                found: (src.type_name.clone(), tgt.type_name.clone()),
            });
        }
        match (def.has_validity_period, validity) {
            (true, None) => return Err(RegisterError::MissingValidity(def.name.clone())),
            (false, Some(_)) => return Err(RegisterError::UnexpectedValidity(def.name.clone())),
            (_, Some(v)) if v.end.is_some_and(|e| e <= v.start) => {
                return Err(RegisterError::InvalidValidity(def.name.clone()))
            }
            _ => {}
        }
        let bidirectional = def.direction == Direction::Bidirectional;

        let same_rel: Vec<_> = self.instances_of(&def.name, &[source, target]);
        if let Some(dup) = same_rel
            .iter()
            .find(|r| r.connects(source, target, bidirectional) && r.validity == validity)
        {
            return Ok(CheckResult::Duplicate(dup.id));
        }

        if def.direction == Direction::MonoContradictory
            && (source == target || same_rel.iter().any(|r| r.source == target && r.target == source))
        {
            return Err(RegisterError::ReverseDirectionViolation {
                rel_name: def.name.clone(),
                from: source,
                to: target,
            });
        }

        let concurrent = |r: &&&RelationshipInstance| match (validity, r.validity) {
            (Some(a), Some(b)) => a.overlaps(&b),
            _ => true,
        };
        let targets_of_source = same_rel
            .iter()
            .filter(|r| r.other_end(source, bidirectional).is_some())
            .filter(concurrent)
            .count();
        if !def.target_cardinality.allows(targets_of_source + 1) {
            return Err(RegisterError::CardinalityViolation {
                rel_name: def.name.clone(),
                entity: source,
                existing: targets_of_source,
            });
        }
        let sources_of_target = same_rel
            .iter()
            .filter(|r| {
                if bidirectional {
                    r.other_end(target, true).is_some()
                } else {
                    r.target == target
                }
            })
            .filter(concurrent)
            .count();
        if !def.source_cardinality.allows(sources_of_target + 1) {
            return Err(RegisterError::CardinalityViolation {
                rel_name: def.name.clone(),
                entity: target,
                existing: sources_of_target,
            });
        }

        for other in self.metamodel.contradicting(&def.name) {
            if other == def.name {
                // Self-pairs express the reversed reading, handled above.
                continue;
            }
            let other_bidirectional = self
                .metamodel
                .relationship(other)
                .is_some_and(|d| d.direction == Direction::Bidirectional);
            let either_bidirectional = bidirectional || other_bidirectional;
            let clash = self
                .instances_of(other, &[source, target])
                .iter()
                .any(|r| r.connects(source, target, either_bidirectional));
            if clash {
                return Err(RegisterError::ContradictionViolation {
                    rel_name: def.name.clone(),
                    conflicting: other.to_string(),
                    from: source,
                    to: target,
                });
            }
        }
        Ok(CheckResult::Accept)
    }

    /// Instances of `rel_name` touching any of `ends`.
    pub(super) fn instances_of(&self, rel_name: &str, ends: &[LocalId]) -> Vec<&RelationshipInstance> {
        let mut ids: Vec<RelId> = ends
            .iter()
            .filter_map(|e| self.adjacency.get(e))
            .flatten()
            .copied()
            .collect();
        ids.sort();
        ids.dedup();
        ids.into_iter()
            .filter_map(|id| self.relationships.get(&id))
            .filter(|r| r.rel_name == rel_name)
            .collect()
    }
}
