//! Derivation of the global register from facts and decisions.
//!
//! The result depends only on the fact base, never on the order in which
//! events arrived, which is what makes eager and batch application
//! converge. Local entities are grouped by a union-find: decisions first,
//! then shared complete keys (repeated until no group changes, because
//! unions can complete new keys). Groups are then visited with keyed
//! groups first, each in anchor order (smallest `(iid, local_id)`), and
//! either bound to a global entity or held back with an issue.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;
use serde_json::Value as Json;

use super::facts::{Decisions, Facts, NodeRelationship};
use super::requests::{IssueKey, IssueKind, IssueMessage, RequestData};
use crate::entity_register::{
    compare_attributes, contradictory_attributes, key_string, EntityRegister, MentionInput, UpsertOutcome,
    Validity,
};
use crate::ids::{GlobalId, Iid, LocalId, NodeRef, TOP_LEVEL_IID};
use crate::metamodel::{AttributeMap, Metamodel};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct GlobalBinding {
    pub iid: Iid,
    pub local_id: LocalId,
    /// Identifier definition the local instance used, if complete.
    pub key_used: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct GlobalRelationship {
    pub rel_name: String,
    pub source: GlobalId,
    pub target: GlobalId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlobalEntity {
    pub global_id: GlobalId,
    pub type_name: String,
    pub attributes: AttributeMap,
    pub relationships: Vec<GlobalRelationship>,
    pub local_bindings: Vec<GlobalBinding>,
}

impl GlobalEntity {
    pub fn nodes(&self) -> Vec<NodeRef> {
        self.local_bindings
            .iter()
            .map(|b| NodeRef::new(b.iid, b.local_id))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub(super) struct Issue {
    pub key: IssueKey,
    pub data: RequestData,
    pub message: IssueMessage,
    pub iid: Iid,
    /// Nodes whose global ids go into the request's `ids`.
    pub id_nodes: Vec<NodeRef>,
}

/// Derived global state.
#[derive(Clone, Debug)]
pub struct Derived {
    pub(super) register: EntityRegister,
    pub(super) scratch_to_gid: BTreeMap<LocalId, GlobalId>,
    pub(super) gid_to_scratch: BTreeMap<GlobalId, LocalId>,
    pub(super) entities: BTreeMap<GlobalId, GlobalEntity>,
    pub(super) binding: BTreeMap<NodeRef, GlobalId>,
    /// Held-back local entities and the issue holding them.
    pub(super) pending: BTreeMap<NodeRef, IssueKey>,
    pub(super) parked: BTreeSet<NodeRelationship>,
    pub(super) issues: Vec<Issue>,
    /// Global ids that disappeared, pointing at their successor.
    pub(super) forwards: BTreeMap<GlobalId, GlobalId>,
    pub(super) retired: BTreeSet<GlobalId>,
    pub(super) next_gid: u64,
}

impl Derived {
    pub(super) fn empty(metamodel: Arc<Metamodel>) -> Self {
        Self {
            register: EntityRegister::new(TOP_LEVEL_IID, metamodel),
            scratch_to_gid: BTreeMap::new(),
            gid_to_scratch: BTreeMap::new(),
            entities: BTreeMap::new(),
            binding: BTreeMap::new(),
            pending: BTreeMap::new(),
            parked: BTreeSet::new(),
            issues: Vec::new(),
            forwards: BTreeMap::new(),
            retired: BTreeSet::new(),
            next_gid: 1,
        }
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// The smaller index becomes the root, so a root is its group's anchor.
    fn union(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.find(a), self.find(b));
        let (root, child) = if ra <= rb { (ra, rb) } else { (rb, ra) };
        self.parent[child] = root;
        root
    }
}

struct Node {
    node: NodeRef,
    type_name: String,
    attributes: AttributeMap,
}

struct Group {
    members: Vec<usize>,
    attributes: AttributeMap,
    /// Attributes on which members disagree.
    contradictory: Vec<String>,
}

struct Ctx<'a> {
    metamodel: &'a Metamodel,
    facts: &'a Facts,
    decisions: &'a Decisions,
    nodes: Vec<Node>,
    index: BTreeMap<NodeRef, usize>,
    uf: UnionFind,
    groups: BTreeMap<usize, Group>,
}

fn effective_attributes(metamodel: &Metamodel, facts: &Facts, decisions: &Decisions, n: NodeRef) -> Option<(String, AttributeMap)> {
    let snap = facts.snapshots.get(&n)?;
    let mut raw = snap.attributes.clone();
    if let Some(patch) = decisions.patches.get(&n) {
        for (k, v) in patch {
            match v {
                Some(v) => {
                    raw.insert(k.clone(), v.clone());
                }
                None => {
                    raw.remove(k);
                }
            }
        }
    }
    let attrs = metamodel
        .validate_attributes(&snap.type_name, &raw)
        .or_else(|_| metamodel.validate_attributes(&snap.type_name, &snap.attributes))
        .ok()?;
    Some((snap.type_name.clone(), attrs))
}

fn fold_group(nodes: &[Node], members: &[usize]) -> (AttributeMap, Vec<String>) {
    let mut acc = AttributeMap::new();
    let mut contradictory = BTreeSet::new();
    for &m in members {
        let attrs = &nodes[m].attributes;
        contradictory.extend(contradictory_attributes(&acc, attrs));
        for (k, v) in attrs {
            let merged = match acc.get(k) {
                Some(old) => old.union(v),
                None => v.clone(),
            };
            acc.insert(k.clone(), merged);
        }
    }
    (acc, contradictory.into_iter().collect())
}

impl<'a> Ctx<'a> {
    fn new(metamodel: &'a Metamodel, facts: &'a Facts, decisions: &'a Decisions) -> Self {
        let nodes: Vec<Node> = facts
            .snapshots
            .keys()
            .filter_map(|n| {
                effective_attributes(metamodel, facts, decisions, *n).map(|(type_name, attributes)| Node {
                    node: *n,
                    type_name,
                    attributes,
                })
            })
            .collect();
        let index = nodes.iter().enumerate().map(|(i, n)| (n.node, i)).collect();
        let uf = UnionFind::new(nodes.len());
        let mut ctx = Self {
            metamodel,
            facts,
            decisions,
            nodes,
            index,
            uf,
            groups: BTreeMap::new(),
        };
        for i in 0..ctx.nodes.len() {
            let (attributes, contradictory) = fold_group(&ctx.nodes, &[i]);
            ctx.groups.insert(
                i,
                Group {
                    members: vec![i],
                    attributes,
                    contradictory,
                },
            );
        }
        ctx
    }

    fn join(&mut self, a: usize, b: usize) -> usize {
        let (ra, rb) = (self.uf.find(a), self.uf.find(b));
        if ra == rb {
            return ra;
        }
        let root = self.uf.union(ra, rb);
        let other = if root == ra { rb } else { ra };
        let moved = self.groups.remove(&other).expect("group root");
        let mut members = self.groups.remove(&root).expect("group root").members;
        members.extend(moved.members);
        members.sort();
        let (attributes, contradictory) = fold_group(&self.nodes, &members);
        self.groups.insert(
            root,
            Group {
                members,
                attributes,
                contradictory,
            },
        );
        root
    }

    fn cannot_link(&mut self, ra: usize, rb: usize) -> bool {
        let pairs: Vec<(NodeRef, NodeRef)> = self.decisions.cannot_link.iter().copied().collect();
        pairs.into_iter().any(|(x, y)| {
            let (Some(&ix), Some(&iy)) = (self.index.get(&x), self.index.get(&y)) else {
                return false;
            };
            let (gx, gy) = (self.uf.find(ix), self.uf.find(iy));
            (gx == ra && gy == rb) || (gx == rb && gy == ra)
        })
    }

    fn compatible(&mut self, ra: usize, rb: usize) -> bool {
        let (a, b) = (&self.groups[&ra], &self.groups[&rb]);
        let type_name = &self.nodes[ra].type_name;
        if *type_name != self.nodes[rb].type_name || !a.contradictory.is_empty() || !b.contradictory.is_empty() {
            return false;
        }
        if !contradictory_attributes(&a.attributes, &b.attributes).is_empty() {
            return false;
        }
        let mut union = a.attributes.clone();
        for (k, v) in &b.attributes {
            let merged = match union.get(k) {
                Some(old) => old.union(v),
                None => v.clone(),
            };
            union.insert(k.clone(), merged);
        }
        if !self.metamodel.apply_rules(type_name, &union).is_clean() {
            return false;
        }
        !self.cannot_link(ra, rb)
    }

    fn apply_must_links(&mut self) {
        let pairs: Vec<(NodeRef, NodeRef)> = self.decisions.must_link.iter().copied().collect();
        for (x, y) in pairs {
            if self.decisions.cannot(x, y) {
                continue;
            }
            if let (Some(&ix), Some(&iy)) = (self.index.get(&x), self.index.get(&y)) {
                if self.nodes[ix].type_name == self.nodes[iy].type_name {
                    self.join(ix, iy);
                }
            }
        }
    }

    /// Groups that share a complete key value, as ordered root pairs.
    fn key_pairs(&self) -> BTreeSet<(usize, usize)> {
        let mut buckets: BTreeMap<(String, usize, String), BTreeSet<usize>> = BTreeMap::new();
        for (&root, g) in &self.groups {
            let type_name = &self.nodes[root].type_name;
            let Some(t) = self.metamodel.entity_type(type_name) else {
                continue;
            };
            for (idx, key) in t.complete_keys(&g.attributes) {
                buckets
                    .entry((type_name.clone(), idx, key_string(key, &g.attributes)))
                    .or_default()
                    .insert(root);
            }
        }
        let mut pairs = BTreeSet::new();
        for roots in buckets.values() {
            let roots: Vec<usize> = roots.iter().copied().collect();
            for i in 0..roots.len() {
                for j in i + 1..roots.len() {
                    pairs.insert((roots[i], roots[j]));
                }
            }
        }
        pairs
    }

    /// Joins key-sharing compatible groups until nothing changes; returns
    /// the remaining conflicting pairs.
    fn key_fixpoint(&mut self) -> BTreeSet<(usize, usize)> {
        loop {
            let mut changed = false;
            let mut conflicts = BTreeSet::new();
            for (a, b) in self.key_pairs() {
                let (ra, rb) = (self.uf.find(a), self.uf.find(b));
                if ra == rb {
                    continue;
                }
                if self.compatible(ra, rb) {
                    self.join(ra, rb);
                    changed = true;
                } else {
                    conflicts.insert((ra.min(rb), ra.max(rb)));
                }
            }
            if !changed {
                return conflicts;
            }
        }
    }

    fn member_nodes(&self, root: usize) -> Vec<NodeRef> {
        self.groups[&root].members.iter().map(|&m| self.nodes[m].node).collect()
    }

    fn has_complete_key(&self, root: usize) -> bool {
        self.metamodel
            .entity_type(&self.nodes[root].type_name)
            .is_some_and(|t| t.complete_keys(&self.groups[&root].attributes).next().is_some())
    }

    fn relationship_lines(&self, members: &[NodeRef]) -> Vec<String> {
        self.facts
            .relationships
            .iter()
            .filter(|r| members.contains(&r.source) || members.contains(&r.target))
            .map(|r| format!("{} {} -> {}", r.rel_name, r.source, r.target))
            .collect()
    }

    fn data(&self, root: usize) -> RequestData {
        let g = &self.groups[&root];
        RequestData {
            type_name: self.nodes[root].type_name.clone(),
            attributes: g.attributes.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
            bindings: self.member_nodes(root),
        }
    }
}

fn sorted_union(into: &mut Vec<String>, more: impl IntoIterator<Item = String>) {
    into.extend(more);
    into.sort();
    into.dedup();
}

fn to_json(attrs: &AttributeMap) -> BTreeMap<String, Json> {
    attrs.iter().map(|(k, v)| (k.clone(), v.to_json())).collect()
}

/// Recomputes the global state. `prior` supplies the previous bindings so
/// that global ids stay stable across derivations.
pub(super) fn derive(
    metamodel: &Arc<Metamodel>,
    facts: &Facts,
    decisions: &Decisions,
    expired: &BTreeSet<NodeRelationship>,
    prior: &Derived,
) -> Derived {
    let mut ctx = Ctx::new(metamodel, facts, decisions);
    ctx.apply_must_links();
    let conflicts = ctx.key_fixpoint();

    let mut order: Vec<usize> = ctx.groups.keys().copied().collect();
    order.sort_by_key(|r| (!ctx.has_complete_key(*r), *r));
    let position: BTreeMap<usize, usize> = order.iter().enumerate().map(|(i, r)| (*r, i)).collect();

    let mut out = Derived::empty(metamodel.clone());
    out.next_gid = prior.next_gid;
    let mut bound_roots: BTreeMap<LocalId, usize> = BTreeMap::new();
    let mut root_scratch: BTreeMap<usize, LocalId> = BTreeMap::new();

    for &root in &order {
        let members = ctx.member_nodes(root);
        let type_name = ctx.nodes[root].type_name.clone();
        let attrs = ctx.groups[&root].attributes.clone();
        let mut message = IssueMessage {
            relationships: ctx.relationship_lines(&members),
            ..Default::default()
        };
        let mut related_roots: Vec<usize> = Vec::new();

        let kind = if !ctx.groups[&root].contradictory.is_empty() {
            message.summary = "entities joined by a decision now disagree".into();
            message.contradictory = ctx.groups[&root].contradictory.clone();
            Some(IssueKind::InternalConflict)
        } else if !metamodel.apply_rules(&type_name, &attrs).is_clean() {
            message.summary = "the combined attributes violate a rule".into();
            message.contradictory = metamodel
                .apply_rules(&type_name, &attrs)
                .violations
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            Some(IssueKind::RuleViolation)
        } else {
            related_roots = conflicts
                .iter()
                .filter_map(|&(a, b)| match (a == root, b == root) {
                    (true, _) => Some(b),
                    (_, true) => Some(a),
                    _ => None,
                })
                .filter(|other| position[other] < position[&root])
                .collect();
            if !related_roots.is_empty() {
                message.summary = "a shared identifier with contradictory attributes".into();
                for other in &related_roots {
                    let o = &ctx.groups[other].attributes;
                    let (coincident, complementary) = compare_attributes(&attrs, o);
                    sorted_union(&mut message.contradictory, contradictory_attributes(&attrs, o));
                    sorted_union(&mut message.coincident, coincident);
                    sorted_union(&mut message.complementary, complementary);
                }
                Some(IssueKind::KeyConflict)
            } else {
                let candidates: Vec<usize> = out
                    .register
                    .find_candidates(&type_name, &attrs, &[])
                    .into_iter()
                    .filter(|c| c.equal_values > 0)
                    .filter_map(|c| bound_roots.get(&c.local_id).copied())
                    .collect();
                for c in candidates {
                    if !ctx.cannot_link(root, c) {
                        related_roots.push(c);
                    }
                }
                if !related_roots.is_empty() {
                    message.summary = "compatible entities exist without a shared identifier".into();
                    for other in &related_roots {
                        let (coincident, complementary) = compare_attributes(&attrs, &ctx.groups[other].attributes);
                        sorted_union(&mut message.coincident, coincident);
                        sorted_union(&mut message.complementary, complementary);
                    }
                    Some(IssueKind::PartialMatch)
                } else {
                    let input = MentionInput {
                        type_name: type_name.clone(),
                        attributes: to_json(&attrs),
                        ..Default::default()
                    };
                    match out.register.create_from_mention(&input) {
                        Ok(UpsertOutcome::Created { local_id }) => {
                            bound_roots.insert(local_id, root);
                            root_scratch.insert(root, local_id);
                            None
                        }
                        Ok(UpsertOutcome::Conflict { report }) => {
                            related_roots = report
                                .colliding
                                .iter()
                                .filter_map(|id| bound_roots.get(id).copied())
                                .collect();
                            message.summary = if related_roots.is_empty() {
                                "the combined attributes violate a rule".into()
                            } else {
                                "a shared identifier with a separated entity".into()
                            };
                            message.contradictory =
                                report.violations.iter().map(|v| format!("{v:?}")).collect();
                            Some(if related_roots.is_empty() {
                                IssueKind::RuleViolation
                            } else {
                                IssueKind::KeyConflict
                            })
                        }
                        Ok(other) => unreachable!("create_from_mention returned {other:?}"),
                        Err(e) => {
                            message.summary = e.to_string();
                            Some(IssueKind::RuleViolation)
                        }
                    }
                }
            }
        };

        if let Some(kind) = kind {
            related_roots.sort();
            related_roots.dedup();
            let related: Vec<NodeRef> = related_roots.iter().flat_map(|r| ctx.member_nodes(*r)).collect();
            let key = IssueKey {
                kind,
                members: members.clone(),
                related: related.clone(),
                relationship: None,
            };
            for m in &members {
                out.pending.insert(*m, key.clone());
            }
            out.issues.push(Issue {
                data: ctx.data(root),
                message,
                iid: members[0].iid,
                id_nodes: related_roots.iter().map(|r| ctx.nodes[*r].node).collect(),
                key,
            });
        }
    }

    // Global ids: each group reuses the smallest previous id of its members.
    let mut used: BTreeSet<GlobalId> = BTreeSet::new();
    for &root in &order {
        let Some(&scratch) = root_scratch.get(&root) else {
            continue;
        };
        let members = ctx.member_nodes(root);
        let previous: BTreeSet<GlobalId> = members.iter().filter_map(|m| prior.binding.get(m).copied()).collect();
        let gid = match previous.iter().find(|g| !used.contains(g)) {
            Some(g) => *g,
            None => {
                let g = GlobalId(out.next_gid);
                out.next_gid += 1;
                g
            }
        };
        used.insert(gid);
        out.scratch_to_gid.insert(scratch, gid);
        out.gid_to_scratch.insert(gid, scratch);
        for m in &members {
            out.binding.insert(*m, gid);
        }
        let local_bindings = members
            .iter()
            .map(|m| GlobalBinding {
                iid: m.iid,
                local_id: m.local_id,
                key_used: facts.snapshots.get(m).and_then(|s| s.key_used.clone()),
            })
            .collect();
        let entity = out.register.get(scratch).expect("bound group");
        out.entities.insert(
            gid,
            GlobalEntity {
                global_id: gid,
                type_name: entity.type_name.clone(),
                attributes: entity.attributes.clone(),
                relationships: Vec::new(),
                local_bindings,
            },
        );
    }
    out.forwards = prior.forwards.clone();
    out.retired = prior.retired.clone();
    for (node, old) in &prior.binding {
        if used.contains(old) || out.forwards.contains_key(old) {
            continue;
        }
        match out.binding.get(node) {
            Some(new) => {
                out.forwards.insert(*old, *new);
            }
            None => {
                out.retired.insert(*old);
            }
        }
    }
    for g in &used {
        out.forwards.remove(g);
        out.retired.remove(g);
    }

    // Relationships, lifted in sorted order so the first compatible wins.
    let mut accepted = BTreeSet::new();
    for r in &facts.relationships {
        if decisions.excluded.contains(r) {
            continue;
        }
        let (s, t) = (facts.resolve(r.source), facts.resolve(r.target));
        let (Some(gs), Some(gt)) = (out.binding.get(&s).copied(), out.binding.get(&t).copied()) else {
            if expired.contains(r) {
                let key = IssueKey {
                    kind: IssueKind::ParkedRelationship,
                    members: vec![],
                    related: vec![],
                    relationship: Some(r.clone()),
                };
                out.issues.push(Issue {
                    data: RequestData {
                        type_name: r.rel_name.clone(),
                        attributes: BTreeMap::new(),
                        bindings: vec![s, t],
                    },
                    message: IssueMessage {
                        summary: "relationship endpoint still unbound".into(),
                        relationships: vec![format!("{} {} -> {}", r.rel_name, s, t)],
                        ..Default::default()
                    },
                    iid: s.iid,
                    id_nodes: [s, t].into_iter().filter(|n| out.binding.contains_key(n)).collect(),
                    key,
                });
            }
            out.parked.insert(r.clone());
            continue;
        };
        let (ls, lt) = (out.gid_to_scratch[&gs], out.gid_to_scratch[&gt]);
        match out.register.add_relationship(&r.rel_name, ls, lt, r.validity) {
            Ok(id) => {
                if accepted.insert(id) {
                    let rel = GlobalRelationship {
                        rel_name: r.rel_name.clone(),
                        source: gs,
                        target: gt,
                        validity: r.validity,
                    };
                    out.entities.get_mut(&gs).expect("bound").relationships.push(rel.clone());
                    if gt != gs {
                        out.entities.get_mut(&gt).expect("bound").relationships.push(rel);
                    }
                }
            }
            Err(e) => {
                let key = IssueKey {
                    kind: IssueKind::RelationshipConflict,
                    members: vec![],
                    related: vec![],
                    relationship: Some(r.clone()),
                };
                out.issues.push(Issue {
                    data: RequestData {
                        type_name: r.rel_name.clone(),
                        attributes: BTreeMap::new(),
                        bindings: vec![s, t],
                    },
                    message: IssueMessage {
                        summary: e.to_string(),
                        relationships: vec![format!("{} {} -> {}", r.rel_name, s, t)],
                        ..Default::default()
                    },
                    iid: s.iid,
                    id_nodes: vec![s, t],
                    key,
                });
            }
        }
    }
    for e in out.entities.values_mut() {
        e.relationships.sort();
    }
    out
}
