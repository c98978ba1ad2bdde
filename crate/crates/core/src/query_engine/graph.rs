//! Breadth-first navigation of the entity graph: entities and documents as
//! nodes, mentions and relationships as edges.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::{entity_key, entity_permission, QueryError};
use crate::access_control::{apply_visibility, EntityView, Permission, PseudonymScope, ViewRequest};
use crate::district::District;
use crate::ids::{LocalId, NodeRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphLimits {
    pub max_depth: usize,
    pub max_nodes: usize,
}

impl Default for GraphLimits {
    fn default() -> Self {
        Self {
            max_depth: 3,
            max_nodes: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphNode {
    Entity {
        id: String,
        local_id: LocalId,
        type_name: String,
        permission: Permission,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        display_name: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attributes: Option<BTreeMap<String, Json>>,
    },
    Document {
        id: String,
        doc_id: String,
        metadata: BTreeMap<String, String>,
    },
    /// Documents mentioning an entity that the user may only count.
    Count { id: String, entity: String, documents: usize },
}

impl GraphNode {
    pub fn id(&self) -> &str {
        match self {
            GraphNode::Entity { id, .. } | GraphNode::Document { id, .. } | GraphNode::Count { id, .. } => id,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphEdge {
    Mention { entity: String, document: String },
    Relationship { rel_name: String, source: String, target: String },
    Count { entity: String, node: String },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntityGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    /// The node cap stopped the expansion.
    pub truncated: bool,
}

fn doc_node_id(doc_id: &str) -> String {
    format!("doc:{doc_id}")
}

struct Walker<'a> {
    d: &'a District,
    user: &'a str,
    included: BTreeMap<LocalId, Permission>,
}

impl Walker<'_> {
    /// Aggregate permission if the entity may appear in the graph.
    fn visible(&mut self, id: LocalId) -> Option<Permission> {
        if let Some(p) = self.included.get(&id) {
            return Some(*p);
        }
        let e = self.d.register().get(id)?;
        let (p, _) = entity_permission(self.d, self.user, e);
        (p >= Permission::WithoutMentions).then(|| {
            self.included.insert(id, p);
            p
        })
    }

    fn mention_visible(&self, doc_id: &str, type_name: &str) -> bool {
        self.d.access().resolve_permission(self.user, doc_id, type_name) >= Permission::ReadAnonymized
    }

    /// Documents an entity is mentioned in, split into shown and counted.
    fn documents_of(&self, id: LocalId) -> (BTreeSet<String>, usize) {
        let Some(e) = self.d.register().get(id) else {
            return (BTreeSet::new(), 0);
        };
        let docs: BTreeSet<String> = self
            .d
            .corpus()
            .annotations_for_entity(id)
            .into_iter()
            .map(|a| a.doc_id.clone())
            .collect();
        let mut shown = BTreeSet::new();
        let mut counted = 0;
        for doc in docs {
            let p = self.d.access().resolve_permission(self.user, &doc, &e.type_name);
            if p >= Permission::ReadAnonymized {
                shown.insert(doc);
            } else if p >= Permission::CountOnly {
                counted += 1;
            }
        }
        (shown, counted)
    }

    fn entities_in(&mut self, doc_id: &str) -> BTreeSet<LocalId> {
        let mut out = BTreeSet::new();
        for a in self.d.corpus().annotations_of(doc_id) {
            let Some(e) = a.entity_ref.and_then(|id| self.d.register().get(id)) else { continue };
            if self.mention_visible(doc_id, &e.type_name) && self.visible(e.local_id).is_some() {
                out.insert(e.local_id);
            }
        }
        out
    }

    fn neighbours(&mut self, id: LocalId) -> BTreeSet<LocalId> {
        let others: Vec<LocalId> = self
            .d
            .register()
            .relationships_of(id)
            .into_iter()
            .map(|r| if r.source == id { r.target } else { r.source })
            .collect();
        others.into_iter().filter(|o| self.visible(*o).is_some()).collect()
    }
}

/// Expands from `start` level by level up to `depth` hops; each level adds
/// entities in id order, then documents in id order, until the node cap.
/// Entities appear when the user may see them at least without mentions,
/// mention edges when the document is readable at least anonymized.
/// Edges are those among the included nodes.
pub fn navigate_graph(
    d: &District,
    user: &str,
    start: LocalId,
    depth: usize,
    limits: GraphLimits,
    scope: &mut PseudonymScope,
) -> Result<EntityGraph, QueryError> {
    if depth == 0 || depth > limits.max_depth {
        return Err(QueryError::InvalidDepth {
            depth,
            max: limits.max_depth,
        });
    }
    let start = d
        .register()
        .get(start)
        .map(|e| e.local_id)
        .ok_or_else(|| QueryError::UnknownEntity(entity_key(NodeRef::new(d.iid(), start))))?;
    let mut w = Walker {
        d,
        user,
        included: BTreeMap::new(),
    };
    if w.visible(start).is_none() {
        return Err(QueryError::PermissionDenied);
    }

    let mut entities: Vec<LocalId> = vec![start];
    let mut documents: Vec<String> = Vec::new();
    let mut seen_e: BTreeSet<LocalId> = [start].into();
    let mut seen_d: BTreeSet<String> = BTreeSet::new();
    let mut frontier_e = vec![start];
    let mut frontier_d: Vec<String> = Vec::new();
    let mut truncated = false;

    'levels: for _ in 0..depth {
        let mut next_e = BTreeSet::new();
        let mut next_d = BTreeSet::new();
        for &e in &frontier_e {
            next_d.extend(w.documents_of(e).0.into_iter().filter(|doc| !seen_d.contains(doc)));
            next_e.extend(w.neighbours(e).into_iter().filter(|x| !seen_e.contains(x)));
        }
        for doc in &frontier_d {
            next_e.extend(w.entities_in(doc).into_iter().filter(|x| !seen_e.contains(x)));
        }
        frontier_e.clear();
        frontier_d.clear();
        for e in next_e {
            if entities.len() + documents.len() >= limits.max_nodes {
                truncated = true;
                break 'levels;
            }
            seen_e.insert(e);
            entities.push(e);
            frontier_e.push(e);
        }
        for doc in next_d {
            if entities.len() + documents.len() >= limits.max_nodes {
                truncated = true;
                break 'levels;
            }
            seen_d.insert(doc.clone());
            documents.push(doc.clone());
            frontier_d.push(doc);
        }
        if frontier_e.is_empty() && frontier_d.is_empty() {
            break;
        }
    }

    let mut graph = EntityGraph {
        truncated,
        ..Default::default()
    };
    let mut edges = BTreeSet::new();
    for &id in &entities {
        let e = d.register().get(id).expect("included entities exist");
        let key = entity_key(NodeRef::new(d.iid(), id));
        let permission = w.included[&id];
        let view = EntityView {
            key: key.clone(),
            type_name: e.type_name.clone(),
            privacy_level: d.access().privacy_level(&e.type_name),
            attributes: e.attributes.clone(),
            relationships: vec![],
        };
        let rendered = apply_visibility(
            &ViewRequest {
                entity: Some(view),
                ..Default::default()
            },
            permission,
            scope,
        )?;
        graph.nodes.push(GraphNode::Entity {
            id: key.clone(),
            local_id: id,
            type_name: e.type_name.clone(),
            permission,
            display_name: rendered.display_name,
            attributes: rendered.attributes,
        });
        let (shown, counted) = w.documents_of(id);
        for doc in shown.iter().filter(|doc| seen_d.contains(*doc)) {
            edges.insert(GraphEdge::Mention {
                entity: key.clone(),
                document: doc_node_id(doc),
            });
        }
        if counted > 0 {
            let node = format!("count:{key}");
            graph.nodes.push(GraphNode::Count {
                id: node.clone(),
                entity: key.clone(),
                documents: counted,
            });
            edges.insert(GraphEdge::Count { entity: key.clone(), node });
        }
        for r in d.register().relationships_of(id) {
            if r.source == id && seen_e.contains(&r.target) {
                edges.insert(GraphEdge::Relationship {
                    rel_name: r.rel_name.clone(),
                    source: key.clone(),
                    target: entity_key(NodeRef::new(d.iid(), r.target)),
                });
            }
        }
    }
    for doc in &documents {
        let stored = d
            .corpus()
            .document(doc)
            .map_err(|_| QueryError::UnknownEntity(doc.clone()))?;
        graph.nodes.push(GraphNode::Document {
            id: doc_node_id(doc),
            doc_id: doc.clone(),
            metadata: stored.metadata.clone(),
        });
    }
    graph.edges = edges.into_iter().collect();
    Ok(graph)
}
