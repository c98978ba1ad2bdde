use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::{Entity, EntityRegister, MentionRelationship, Role};
use crate::ids::LocalId;
use crate::metamodel::{fold, AttributeMap, Value};

/// One entity that might coincide with a partially identified mention.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub local_id: LocalId,
    /// Number of equal attribute values (list elements count one each).
    pub equal_values: usize,
    /// Relationship endpoints shared with the mention.
    pub shared_endpoints: usize,
    pub coincident: Vec<String>,
    /// Attributes present on only one side.
    pub complementary: Vec<String>,
    pub entity: Entity,
}

impl EntityRegister {
    /// Entities of `type_name` with no contradicting single-valued attribute,
    /// ranked by equal values, then shared relationship endpoints, then id.
    pub fn find_candidates(
        &self,
        type_name: &str,
        partial: &AttributeMap,
        relationships: &[MentionRelationship],
    ) -> Vec<Candidate> {
        let Some(members) = self.by_type.get(type_name) else {
            return Vec::new();
        };
        if partial.is_empty() && relationships.is_empty() {
            return Vec::new();
        }
        let mut excluded: BTreeSet<LocalId> = BTreeSet::new();
        let mut equal: BTreeMap<LocalId, usize> = BTreeMap::new();

        for (attr, value) in partial {
            match value {
                Value::List(items) => {
                    for item in items {
                        for id in self.postings(type_name, attr, &fold(item)) {
                            *equal.entry(id).or_default() += 1;
                        }
                    }
                }
                single => {
                    let holders = self
                        .attribute_holders
                        .get(&(type_name.to_string(), attr.clone()))
                        .cloned()
                        .unwrap_or_default();
                    let matching: BTreeSet<LocalId> = match single {
                        // Float keys are approximate, so fall back to a scan.
                        Value::Float(_) => holders
                            .iter()
                            .copied()
                            .filter(|id| {
                                self.entities[id]
                                    .attributes
                                    .get(attr)
                                    .is_some_and(|v| v.same_as(single))
                            })
                            .collect(),
                        _ => self.postings(type_name, attr, &single.index_key()),
                    };
                    for id in &matching {
                        *equal.entry(*id).or_default() += 1;
                    }
                    excluded.extend(holders.difference(&matching));
                }
            }
        }

        let mut shared: BTreeMap<LocalId, usize> = BTreeMap::new();
        for mr in relationships {
            let Ok(other) = self.resolve(mr.other) else {
                continue;
            };
            let bidirectional = self.is_bidirectional(&mr.rel_name);
            for rel in self.instances_of(&mr.rel_name, &[other]) {
                let partner = match mr.role {
                    // The mention is the source, so candidates sit at the source end.
                    Role::Source if rel.target == other => Some(rel.source),
                    Role::Target if rel.source == other => Some(rel.target),
                    _ if bidirectional => rel.other_end(other, true),
                    _ => None,
                };
                if let Some(p) = partner {
                    *shared.entry(p).or_default() += 1;
                }
            }
        }

        let mut out: Vec<Candidate> = members
            .iter()
            .filter(|id| !excluded.contains(id))
            .map(|id| {
                let entity = &self.entities[id];
                let (coincident, complementary) = compare_attributes(partial, &entity.attributes);
                Candidate {
                    local_id: *id,
                    equal_values: equal.get(id).copied().unwrap_or(0),
                    shared_endpoints: shared.get(id).copied().unwrap_or(0),
                    coincident,
                    complementary,
                    entity: entity.clone(),
                }
            })
            .collect();
        out.sort_by(|a, b| {
            b.equal_values
                .cmp(&a.equal_values)
                .then(b.shared_endpoints.cmp(&a.shared_endpoints))
                .then(a.local_id.cmp(&b.local_id))
        });
        out
    }

    fn postings(&self, type_name: &str, attr: &str, key: &str) -> BTreeSet<LocalId> {
        self.value_index
            .get(&(type_name.to_string(), attr.to_string(), key.to_string()))
            .cloned()
            .unwrap_or_default()
    }
}

/// Splits attribute names into coincident (equal on both sides) and
/// complementary (present on only one side).
pub fn compare_attributes(a: &AttributeMap, b: &AttributeMap) -> (Vec<String>, Vec<String>) {
    let mut coincident = Vec::new();
    let mut complementary = Vec::new();
    let names: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    for name in names {
        match (a.get(name), b.get(name)) {
            (Some(x), Some(y)) if x.same_as(y) => coincident.push(name.clone()),
            (Some(Value::List(x)), Some(Value::List(y)))
                if x.iter().any(|i| y.iter().any(|j| fold(i) == fold(j))) =>
            {
                coincident.push(name.clone())
            }
            (Some(_), None) | (None, Some(_)) => complementary.push(name.clone()),
            _ => {}
        }
    }
    (coincident, complementary)
}

/// Single-valued attributes whose values differ.
pub fn contradictory_attributes(a: &AttributeMap, b: &AttributeMap) -> Vec<String> {
    a.iter()
        .filter(|(name, v)| {
            !matches!(v, Value::List(_)) && b.get(*name).is_some_and(|w| !w.same_as(v))
        })
        .map(|(name, _)| name.clone())
        .collect()
}
