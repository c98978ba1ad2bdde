//! Local and federated queries with per-document visibility filtering,
//! entity-graph navigation and statistics.

mod graph;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

pub use graph::{navigate_graph, EntityGraph, GraphEdge, GraphLimits, GraphNode};
pub use stats::{stat_query, GroupBy, StatSpec, StatTable};

use crate::access_control::{
    apply_visibility, display_label, render_document, AccessError, AnnotationContext, DocumentView,
    EntityRendering, EntityView, MentionView, Permission, PseudonymScope, RelationshipView, ViewRequest,
};
use crate::district::District;
use crate::entity_register::Entity;
use crate::federation::TopLevel;
use crate::ids::{GlobalId, Iid, LocalId, NodeRef};
use crate::metamodel::{AttributeMap, MetamodelError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueryError {
    #[error("permission denied")]
    PermissionDenied,
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("depth must be between 1 and {max}, got {depth}")]
    InvalidDepth { depth: usize, max: usize },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("remote instance: {0}")]
    Remote(String),
}

impl From<AccessError> for QueryError {
    fn from(e: AccessError) -> Self {
        match e {
            AccessError::PermissionDenied => QueryError::PermissionDenied,
            other => QueryError::InvalidQuery(other.to_string()),
        }
    }
}

impl From<MetamodelError> for QueryError {
    fn from(e: MetamodelError) -> Self {
        match e {
            MetamodelError::UnknownAttribute { attribute, .. } => QueryError::UnknownAttribute(attribute),
            other => QueryError::InvalidQuery(other.to_string()),
        }
    }
}

/// Levels at which an entity's attribute values are shown as they are.
pub fn shows_values(p: Permission) -> bool {
    matches!(p, Permission::FullControl | Permission::ReadOnly | Permission::WithoutMentions)
}

pub fn entity_key(node: NodeRef) -> String {
    format!("{}:{}", node.iid.0, node.local_id.0)
}

/// The user's permission on every document mentioning `e`, and their maximum.
/// An entity nobody mentions is `Denied`.
pub fn entity_permission(d: &District, user: &str, e: &Entity) -> (Permission, BTreeMap<String, Permission>) {
    let per_doc: BTreeMap<String, Permission> = e
        .provenance
        .iter()
        .map(|m| m.doc_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|doc| {
            let p = d.access().resolve_permission(user, &doc, &e.type_name);
            (doc, p)
        })
        .collect();
    let aggregate = per_doc.values().copied().max().unwrap_or(Permission::Denied);
    (aggregate, per_doc)
}

fn attribute_strings(attributes: &AttributeMap) -> Vec<String> {
    attributes.values().flat_map(|v| v.display_strings()).collect()
}

/// Context of every annotation of a document, for rendering it.
pub fn annotation_contexts(d: &District, doc_id: &str) -> Vec<AnnotationContext> {
    d.corpus()
        .annotations_of(doc_id)
        .into_iter()
        .map(|a| {
            let entity = a.entity_ref.and_then(|id| d.register().get(id));
            let type_name = entity.map(|e| e.type_name.clone()).unwrap_or_else(|| a.tag.clone());
            AnnotationContext {
                span: a.span,
                privacy_level: d.access().privacy_level(&type_name),
                type_name,
                entity_key: entity.map(|e| entity_key(NodeRef::new(d.iid(), e.local_id))),
                values: entity.map(|e| attribute_strings(&e.attributes)).unwrap_or_default(),
            }
        })
        .collect()
}

/// Document text as the user may read it; withheld sections are left out.
fn visible_text(d: &District, user: &str, doc_id: &str, scope: &mut PseudonymScope) -> Result<String, QueryError> {
    let doc = d
        .corpus()
        .document(doc_id)
        .map_err(|_| QueryError::UnknownEntity(doc_id.to_string()))?;
    let rendering = render_document(d.access(), user, doc, &annotation_contexts(d, doc_id), scope)?;
    Ok(rendering.sections.into_iter().filter_map(|s| s.text).collect())
}

/// An entity as its own instance renders it for one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityDetail {
    pub key: String,
    pub local_id: LocalId,
    pub rendering: EntityRendering,
}

fn relationship_views(
    d: &District,
    user: &str,
    e: &Entity,
    scope: &mut PseudonymScope,
) -> Result<Vec<RelationshipView>, QueryError> {
    let mut out = Vec::new();
    for r in d.register().relationships_of(e.local_id) {
        let outgoing = r.source == e.local_id;
        let other_id = if outgoing { r.target } else { r.source };
        let Some(other) = d.register().get(other_id) else { continue };
        let key = entity_key(NodeRef::new(d.iid(), other.local_id));
        let values = attribute_strings(&other.attributes);
        let (p, _) = entity_permission(d, user, other);
        let public = shows_values(p);
        let label = if public {
            display_label(&other.type_name, &other.attributes)
        } else {
            scope.pseudonym(&other.type_name, &key, &values)?
        };
        out.push(RelationshipView {
            rel_name: r.rel_name.clone(),
            outgoing,
            other_key: key,
            other_type: other.type_name.clone(),
            other_label: label,
            other_public: public,
            other_values: values,
        });
    }
    Ok(out)
}

/// Detail view of a local entity. The rendering level is the most
/// permissive one the user holds through any mentioning document; mentions
/// and document bodies come only from documents readable at least
/// anonymized, while counts cover every document seen at least as a count.
pub fn get_entity_detail(
    d: &District,
    user: &str,
    id: LocalId,
    scope: &mut PseudonymScope,
) -> Result<EntityDetail, QueryError> {
    let e = d
        .register()
        .get(id)
        .ok_or_else(|| QueryError::UnknownEntity(entity_key(NodeRef::new(d.iid(), id))))?;
    let (aggregate, per_doc) = entity_permission(d, user, e);
    if aggregate == Permission::Denied {
        return Err(QueryError::PermissionDenied);
    }
    let key = entity_key(NodeRef::new(d.iid(), e.local_id));
    let view = EntityView {
        key: key.clone(),
        type_name: e.type_name.clone(),
        privacy_level: d.access().privacy_level(&e.type_name),
        attributes: e.attributes.clone(),
        relationships: relationship_views(d, user, e, scope)?,
    };
    let readable = |doc: &str| per_doc.get(doc).is_some_and(|p| *p >= Permission::ReadAnonymized);
    let counted = |doc: &str| per_doc.get(doc).is_some_and(|p| *p >= Permission::CountOnly);

    let mut mentions = Vec::new();
    for m in &e.provenance {
        if !counted(&m.doc_id) {
            continue;
        }
        let Ok(ann) = d.corpus().annotation(&m.ann_id) else { continue };
        mentions.push(MentionView {
            doc_id: m.doc_id.clone(),
            ann_id: m.ann_id.clone(),
            span: ann.span,
            text: d.corpus().annotated_text(ann).unwrap_or_default(),
        });
    }
    let mut documents = Vec::new();
    for (doc, _) in per_doc.iter().filter(|(doc, _)| counted(doc)) {
        let text = if readable(doc) && aggregate >= Permission::ReadAnonymized {
            visible_text(d, user, doc, scope)?
        } else {
            String::new()
        };
        documents.push(DocumentView {
            doc_id: doc.clone(),
            text,
            ..Default::default()
        });
    }
    let request = ViewRequest {
        entity: Some(view),
        mentions,
        documents,
    };
    let mut rendering = apply_visibility(&request, aggregate, scope)?;
    if let Some(ms) = rendering.mentions.as_mut() {
        ms.retain(|m| readable(&m.doc_id));
    }
    if let Some(ds) = rendering.documents.as_mut() {
        ds.retain(|doc| readable(&doc.doc_id));
    }
    Ok(EntityDetail {
        key,
        local_id: e.local_id,
        rendering,
    })
}

// ---- federated views ----------------------------------------------------

/// One district's rendering of a bound local entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fragment {
    pub iid: Iid,
    pub local_id: LocalId,
    pub rendering: EntityRendering,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederatedHit {
    pub global_id: GlobalId,
    pub type_name: String,
    pub fragments: Vec<Fragment>,
    /// Bindings whose owner refused the user.
    pub denied: usize,
}

/// Renders fragments on behalf of the district owning them.
pub trait FragmentSource {
    /// `Ok(None)` when the owner denies the user.
    fn fragment(&self, node: NodeRef, user: &str, scope_key: &str) -> Result<Option<EntityRendering>, QueryError>;
}

/// Answers the federated half of an entity query.
pub trait FederatedSearch {
    fn federated_hits(
        &self,
        user: &str,
        type_name: &str,
        attributes: &BTreeMap<String, Json>,
        scope_key: &str,
    ) -> Result<Vec<FederatedHit>, QueryError>;
}

/// Renders one district's fragment of a node, for any caller holding it.
pub fn district_fragment(
    d: &District,
    local_id: LocalId,
    user: &str,
    scope_key: &str,
) -> Result<Option<EntityRendering>, QueryError> {
    let mut scope = PseudonymScope::new(scope_key);
    match get_entity_detail(d, user, local_id, &mut scope) {
        Ok(detail) => Ok(Some(detail.rendering)),
        Err(QueryError::PermissionDenied) | Err(QueryError::UnknownEntity(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Districts living in the same process.
impl FragmentSource for Vec<&District> {
    fn fragment(&self, node: NodeRef, user: &str, scope_key: &str) -> Result<Option<EntityRendering>, QueryError> {
        match self.iter().find(|d| d.iid() == node.iid) {
            Some(d) => district_fragment(d, node.local_id, user, scope_key),
            None => Ok(None),
        }
    }
}

/// Global view of one entity: the fragments each owning district renders.
pub fn federated_detail(
    top: &TopLevel,
    source: &dyn FragmentSource,
    user: &str,
    gid: GlobalId,
    scope_key: &str,
) -> Result<FederatedHit, QueryError> {
    let g = top
        .global_entity(gid)
        .ok_or_else(|| QueryError::UnknownEntity(format!("G{}", gid.0)))?;
    let mut fragments = Vec::new();
    let mut denied = 0;
    for node in g.nodes() {
        match source.fragment(node, user, scope_key)? {
            Some(rendering) => fragments.push(Fragment {
                iid: node.iid,
                local_id: node.local_id,
                rendering,
            }),
            None => denied += 1,
        }
    }
    Ok(FederatedHit {
        global_id: g.global_id,
        type_name: g.type_name.clone(),
        fragments,
        denied,
    })
}

/// Global entities matching a partial attribute set: those sharing at least
/// one value, or every entity of the type when no attribute is given.
pub fn global_matches(top: &TopLevel, type_name: &str, partial: &AttributeMap) -> Vec<GlobalId> {
    if partial.is_empty() {
        return top
            .global_entities()
            .filter(|g| g.type_name == type_name)
            .map(|g| g.global_id)
            .collect();
    }
    top.global_candidates(type_name, partial)
        .into_iter()
        .filter(|(_, c)| c.equal_values > 0)
        .map(|(g, _)| g)
        .collect()
}

/// The top level's side of a federated entity query.
pub fn federated_search(
    top: &TopLevel,
    source: &dyn FragmentSource,
    user: &str,
    type_name: &str,
    attributes: &BTreeMap<String, Json>,
    scope_key: &str,
) -> Result<Vec<FederatedHit>, QueryError> {
    let partial = top.metamodel().validate_attributes(type_name, attributes)?;
    global_matches(top, type_name, &partial)
        .into_iter()
        .map(|g| federated_detail(top, source, user, g, scope_key))
        .collect()
}

/// A top level and its districts in one process.
pub struct InProcess<'a> {
    pub top: &'a TopLevel,
    pub districts: Vec<&'a District>,
}

impl FederatedSearch for InProcess<'_> {
    fn federated_hits(
        &self,
        user: &str,
        type_name: &str,
        attributes: &BTreeMap<String, Json>,
        scope_key: &str,
    ) -> Result<Vec<FederatedHit>, QueryError> {
        federated_search(self.top, &self.districts, user, type_name, attributes, scope_key)
    }
}

// ---- entity queries -----------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Completeness {
    Fresh,
    /// Children are still syncing; poll the token for the final answer.
    PendingSync { token: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub local_hits: Vec<EntityDetail>,
    pub federated_hits: Vec<FederatedHit>,
    pub completeness: Completeness,
}

/// Local entities matching a partial attribute set, in id order when no
/// attribute is given and by candidate rank otherwise.
pub fn local_matches(d: &District, type_name: &str, partial: &AttributeMap) -> Vec<LocalId> {
    if partial.is_empty() {
        return d.register().entities_of_type(type_name).map(|e| e.local_id).collect();
    }
    d.register()
        .find_candidates(type_name, partial, &[])
        .into_iter()
        .filter(|c| c.equal_values > 0)
        .map(|c| c.local_id)
        .collect()
}

/// Entity query: local candidates rendered here, plus the federated view
/// when a federation is reachable. Denied hits are left out; the query
/// fails only when there were hits and every one was denied.
pub fn query_entity(
    d: &District,
    user: &str,
    type_name: &str,
    attributes: &BTreeMap<String, Json>,
    federation: Option<&dyn FederatedSearch>,
    scope: &mut PseudonymScope,
) -> Result<QueryResult, QueryError> {
    if !d.access().knows_user(user) {
        return Err(QueryError::UnknownUser(user.to_string()));
    }
    let partial = d.metamodel().validate_attributes(type_name, attributes)?;
    let mut seen = 0;
    let mut local_hits = Vec::new();
    for id in local_matches(d, type_name, &partial) {
        seen += 1;
        match get_entity_detail(d, user, id, scope) {
            Ok(detail) => local_hits.push(detail),
            Err(QueryError::PermissionDenied) => {}
            Err(e) => return Err(e),
        }
    }
    let mut federated_hits = Vec::new();
    if let Some(f) = federation {
        for hit in f.federated_hits(user, type_name, attributes, scope.scope_key())? {
            seen += hit.fragments.len() + hit.denied;
            if !hit.fragments.is_empty() {
                federated_hits.push(hit);
            }
        }
    }
    if seen > 0 && local_hits.is_empty() && federated_hits.is_empty() {
        return Err(QueryError::PermissionDenied);
    }
    Ok(QueryResult {
        local_hits,
        federated_hits,
        completeness: Completeness::Fresh,
    })
}
