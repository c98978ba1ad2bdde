//! Count-only statistics over annotated documents. Counts carry no ids and
//! no values beyond group keys, so they ignore per-entity permissions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::QueryError;
use crate::district::District;
use crate::ids::LocalId;
use crate::metamodel::fold;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "name", rename_all = "snake_case")]
pub enum GroupBy {
    Attribute(String),
    Type,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatSpec {
    /// Only entities of this type; required when grouping by attribute.
    #[serde(default)]
    pub type_name: Option<String>,
    pub group_by: GroupBy,
    /// Document metadata that must match (case-insensitively).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    /// Only documents carrying an annotation with this tag.
    #[serde(default)]
    pub tag: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatTable {
    pub groups: BTreeMap<String, usize>,
    /// Entities counted, including those without the grouping attribute.
    pub entities: usize,
    pub documents: usize,
}

/// Counts distinct entities mentioned in the matching documents, grouped by
/// an attribute value or by type. Entities lacking the attribute are
/// counted in `entities` but in no group.
pub fn stat_query(d: &District, user: &str, spec: &StatSpec) -> Result<StatTable, QueryError> {
    if !d.access().knows_user(user) {
        return Err(QueryError::UnknownUser(user.to_string()));
    }
    if let Some(t) = &spec.type_name {
        d.metamodel()
            .require_type(t)
            .map_err(|_| QueryError::InvalidQuery(format!("unknown entity type `{t}`")))?;
    }
    if let GroupBy::Attribute(attr) = &spec.group_by {
        let defined = spec
            .type_name
            .as_deref()
            .and_then(|t| d.metamodel().entity_type(t))
            .is_some_and(|t| t.attribute(attr).is_some());
        if !defined {
            return Err(QueryError::UnknownAttribute(attr.clone()));
        }
    }

    let mut table = StatTable::default();
    let mut counted: BTreeSet<LocalId> = BTreeSet::new();
    for doc in d.corpus().documents() {
        let metadata_ok = spec
            .metadata
            .iter()
            .all(|(k, v)| doc.metadata.get(k).is_some_and(|have| fold(have) == fold(v)));
        if !metadata_ok {
            continue;
        }
        let annotations = d.corpus().annotations_of(&doc.doc_id);
        if let Some(tag) = &spec.tag {
            if !annotations.iter().any(|a| &a.tag == tag) {
                continue;
            }
        }
        table.documents += 1;
        for a in annotations {
            let Some(e) = a.entity_ref.and_then(|id| d.register().get(id)) else { continue };
            if spec.type_name.as_ref().is_some_and(|t| t != &e.type_name) || !counted.insert(e.local_id) {
                continue;
            }
            table.entities += 1;
            let key = match &spec.group_by {
                GroupBy::Type => Some(e.type_name.clone()),
                GroupBy::Attribute(attr) => e.attributes.get(attr).map(|v| v.display_strings().join(", ")),
            };
            if let Some(k) = key {
                *table.groups.entry(k).or_default() += 1;
            }
        }
    }
    Ok(table)
}
