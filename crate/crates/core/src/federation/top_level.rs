use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};

use super::directory::{InstanceDirectory, InstanceRecord};
use super::events::{SyncEvent, SyncEventKind};
use super::facts::{ordered, Decisions, Facts, NodeRelationship};
use super::requests::{
    ActionRequest, Decision, HistoryEntry, IssueKey, IssueKind, NormalizedRequest, RequestId, RequestStatus,
};
use super::resolve::{derive, Derived, GlobalEntity};
use super::wal::Wal;
use super::FederationError;
use crate::entity_register::{contradictory_attributes, key_string, Candidate, EntityRegister};
use crate::ids::{GlobalId, Iid, LocalId, NodeRef, TOP_LEVEL_IID};
use crate::metamodel::{AttributeMap, Metamodel};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopLevelConfig {
    pub address: String,
    /// Users enabled to deal with entities at the top level.
    pub masters: BTreeSet<String>,
    /// How long a relationship may wait for an unbound endpoint.
    pub parked_ttl_secs: i64,
}

impl Default for TopLevelConfig {
    fn default() -> Self {
        Self {
            address: "local".into(),
            masters: ["master".to_string()].into(),
            parked_ttl_secs: 86_400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum SyncOutcome {
    CreatedGlobal { global_id: GlobalId },
    MergedInto { global_id: GlobalId },
    ActionRequired { request_id: RequestId },
    /// Relationship lifted to the global register.
    Linked,
    /// Relationship waiting for an unbound endpoint.
    Parked,
    Retired,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub seq: u64,
    pub outcome: SyncOutcome,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub iid: Option<Iid>,
    pub outcomes: Vec<EventOutcome>,
    /// Redelivered events that were already applied.
    pub duplicates: Vec<u64>,
    pub watermark: u64,
    /// Current global binding of every local entity of the instance.
    pub bindings: BTreeMap<LocalId, GlobalId>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Resolution {
    pub request: ActionRequest,
    pub bindings: BTreeMap<GlobalId, Vec<NodeRef>>,
}

/// Where `run_batch_sync` reads an instance's pending events from.
pub trait EventSource {
    fn events_after(&mut self, iid: Iid, watermark: u64) -> Result<Vec<SyncEvent>, FederationError>;
}

impl EventSource for EntityRegister {
    fn events_after(&mut self, _iid: Iid, watermark: u64) -> Result<Vec<SyncEvent>, FederationError> {
        Ok(EntityRegister::events_after(self, watermark).to_vec())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum WalRecord {
    Register { instance: InstanceRecord },
    Events { iid: Iid, events: Vec<SyncEvent>, at: DateTime<Utc> },
    Claim { request_id: RequestId, actor: String, at: DateTime<Utc> },
    Decision { request_id: RequestId, decision: Decision, actor: String, at: DateTime<Utc> },
    Expire { at: DateTime<Utc> },
}

/// Global entity with ids replaced by the local entities they bind.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CanonicalEntity {
    pub type_name: String,
    pub attributes: BTreeMap<String, Json>,
    pub bindings: Vec<NodeRef>,
    /// `(rel_name, source anchor, target anchor)`.
    pub relationships: Vec<(String, NodeRef, NodeRef)>,
}

/// Id- and timestamp-free view of the global register and open requests.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CanonicalState {
    pub entities: Vec<CanonicalEntity>,
    pub requests: Vec<NormalizedRequest>,
    pub parked: Vec<NodeRelationship>,
}

/// The top-level instance: hierarchy table, global register and
/// action-request queue. All mutations go through `&mut self`; the service
/// wraps it in a single-writer lock.
#[derive(Debug)]
pub struct TopLevel {
    metamodel: Arc<Metamodel>,
    config: TopLevelConfig,
    directory: InstanceDirectory,
    facts: Facts,
    decisions: Decisions,
    watermarks: BTreeMap<Iid, u64>,
    /// Every applied seq per instance, in application order.
    applied: BTreeMap<Iid, Vec<u64>>,
    derived: Derived,
    requests: BTreeMap<RequestId, ActionRequest>,
    open_by_issue: BTreeMap<IssueKey, RequestId>,
    withdrawn: Vec<ActionRequest>,
    next_request: u64,
    parked_since: BTreeMap<NodeRelationship, DateTime<Utc>>,
    expired: BTreeSet<NodeRelationship>,
    wal: Option<Wal>,
    replay_at: Option<DateTime<Utc>>,
}

const SYSTEM_ACTOR: &str = "system";

impl TopLevel {
    pub fn new(metamodel: Arc<Metamodel>, config: TopLevelConfig) -> Self {
        Self {
            directory: InstanceDirectory::new(config.address.clone()),
            derived: Derived::empty(metamodel.clone()),
            metamodel,
            config,
            facts: Facts::default(),
            decisions: Decisions::default(),
            watermarks: BTreeMap::new(),
            applied: BTreeMap::new(),
            requests: BTreeMap::new(),
            open_by_issue: BTreeMap::new(),
            withdrawn: Vec::new(),
            next_request: 1,
            parked_since: BTreeMap::new(),
            expired: BTreeSet::new(),
            wal: None,
            replay_at: None,
        }
    }

    /// Opens a durable top level, replaying its log.
    pub fn open(metamodel: Arc<Metamodel>, config: TopLevelConfig, log: &Path) -> Result<Self, FederationError> {
        let (wal, records) = Wal::open::<WalRecord>(log)?;
        let mut top = Self::new(metamodel, config);
        for (i, record) in records.into_iter().enumerate() {
            top.replay(record).map_err(|e| FederationError::Wal {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        top.wal = Some(wal);
        Ok(top)
    }

    fn replay(&mut self, record: WalRecord) -> Result<(), FederationError> {
        match record {
            WalRecord::Register { instance } => {
                self.directory.restore(instance);
                Ok(())
            }
            WalRecord::Events { iid, events, at } => {
                self.replay_at = Some(at);
                self.apply_events(iid, &events, at);
                Ok(())
            }
            WalRecord::Claim { request_id, actor, at } => self.apply_claim(request_id, &actor, at),
            WalRecord::Decision {
                request_id,
                decision,
                actor,
                at,
            } => {
                let decisions = self.validate_decision(request_id, &decision)?;
                self.apply_decision(request_id, &decision, &actor, decisions, at);
                Ok(())
            }
            WalRecord::Expire { at } => {
                self.apply_expire(at);
                Ok(())
            }
        }
    }

    fn now(&self) -> DateTime<Utc> {
        self.replay_at.unwrap_or_else(Utc::now)
    }

    fn log(&mut self, record: &WalRecord) -> Result<(), FederationError> {
        match &mut self.wal {
            Some(w) => w.append(record),
            None => Ok(()),
        }
    }

    pub fn metamodel(&self) -> &Arc<Metamodel> {
        &self.metamodel
    }

    pub fn config(&self) -> &TopLevelConfig {
        &self.config
    }

    pub fn directory(&self) -> &InstanceDirectory {
        &self.directory
    }

    pub fn facts(&self) -> &Facts {
        &self.facts
    }

    // ---- hierarchy -----------------------------------------------------

    pub fn register_instance(&mut self, parent_iid: Iid, address: &str) -> Result<Iid, FederationError> {
        let mut directory = self.directory.clone();
        let iid = directory.register_instance(parent_iid, address)?;
        let record = directory.get(iid).expect("just registered").clone();
        self.log(&WalRecord::Register { instance: record })?;
        self.directory = directory;
        Ok(iid)
    }

    /// Records a new address for a registered instance (after a restart on
    /// another port, say).
    pub fn update_address(&mut self, iid: Iid, address: &str) -> Result<(), FederationError> {
        let mut record = self
            .directory
            .get(iid)
            .cloned()
            .ok_or(FederationError::UnknownInstance(iid))?;
        if record.address == address {
            return Ok(());
        }
        record.address = address.to_string();
        self.log(&WalRecord::Register { instance: record })?;
        self.directory.set_address(iid, address)
    }

    // ---- synchronization -----------------------------------------------

    pub fn watermark(&self, iid: Iid) -> u64 {
        self.watermarks.get(&iid).copied().unwrap_or(0)
    }

    /// Applies a batch of events from `iid`. Events at or below the
    /// watermark are redeliveries and are skipped; the rest must continue
    /// the sequence without gaps. The whole batch is logged before it is
    /// applied and the global state is derived once at the end.
    pub fn sync_events(&mut self, iid: Iid, events: &[SyncEvent]) -> Result<SyncReport, FederationError> {
        if iid == TOP_LEVEL_IID || !self.directory.contains(iid) {
            return Err(FederationError::UnknownInstance(iid));
        }
        let mut expected = self.watermark(iid) + 1;
        let mut fresh = Vec::new();
        let mut duplicates = Vec::new();
        for e in events {
            if e.seq < expected {
                duplicates.push(e.seq);
                continue;
            }
            if e.seq != expected {
                return Err(FederationError::SeqGap {
                    iid,
                    expected,
                    got: e.seq,
                });
            }
            self.check_event(e)?;
            fresh.push(e.clone());
            expected += 1;
        }
        if !fresh.is_empty() {
            let at = self.now();
            self.log(&WalRecord::Events {
                iid,
                events: fresh.clone(),
                at,
            })?;
            self.apply_events(iid, &fresh, at);
        }
        Ok(SyncReport {
            iid: Some(iid),
            outcomes: fresh
                .iter()
                .map(|e| EventOutcome {
                    seq: e.seq,
                    outcome: self.outcome(iid, e),
                })
                .collect(),
            duplicates,
            watermark: self.watermark(iid),
            bindings: self.bindings_for(iid),
        })
    }

    /// Eager mode: one event at a time.
    pub fn sync_entity(&mut self, iid: Iid, event: &SyncEvent) -> Result<SyncReport, FederationError> {
        self.sync_events(iid, std::slice::from_ref(event))
    }

    /// Batch mode: pulls everything past the watermark and applies it.
    pub fn run_batch_sync(&mut self, iid: Iid, source: &mut dyn EventSource) -> Result<SyncReport, FederationError> {
        if iid == TOP_LEVEL_IID || !self.directory.contains(iid) {
            return Err(FederationError::UnknownInstance(iid));
        }
        let events = source.events_after(iid, self.watermark(iid))?;
        self.sync_events(iid, &events)
    }

    fn check_event(&self, e: &SyncEvent) -> Result<(), FederationError> {
        let snapshots = match &e.kind {
            SyncEventKind::EntityCreated { entity }
            | SyncEventKind::EntityEnlarged { entity }
            | SyncEventKind::MergePerformed { entity, .. } => vec![entity],
            SyncEventKind::SplitPerformed { original, split_off, .. } => vec![original, split_off],
            SyncEventKind::RelationshipAdded { relationship } => {
                if self.metamodel.relationship(&relationship.rel_name).is_none() {
                    return Err(FederationError::MetamodelMismatch(format!(
                        "unknown relationship `{}`",
                        relationship.rel_name
                    )));
                }
                vec![]
            }
            SyncEventKind::EntityRetired { .. } => vec![],
        };
        for s in snapshots {
            self.metamodel
                .validate_attributes(&s.type_name, &s.attributes)
                .map_err(|err| FederationError::MetamodelMismatch(err.to_string()))?;
        }
        Ok(())
    }

    fn apply_events(&mut self, iid: Iid, events: &[SyncEvent], at: DateTime<Utc>) {
        for e in events {
            self.facts.apply(&mut self.decisions, iid, e);
            self.watermarks.insert(iid, e.seq);
            self.applied.entry(iid).or_default().push(e.seq);
        }
        self.recompute(at);
    }

    fn outcome(&self, iid: Iid, e: &SyncEvent) -> SyncOutcome {
        let entity_outcome = |id: LocalId| {
            let n = self.facts.resolve(NodeRef::new(iid, id));
            if let Some(g) = self.derived.binding.get(&n) {
                let e = &self.derived.entities[g];
                if e.local_bindings.len() > 1 {
                    SyncOutcome::MergedInto { global_id: *g }
                } else {
                    SyncOutcome::CreatedGlobal { global_id: *g }
                }
            } else if let Some(key) = self.derived.pending.get(&n) {
                match self.open_by_issue.get(key) {
                    Some(r) => SyncOutcome::ActionRequired { request_id: *r },
                    None => SyncOutcome::Retired,
                }
            } else {
                SyncOutcome::Retired
            }
        };
        match &e.kind {
            SyncEventKind::EntityCreated { entity } | SyncEventKind::EntityEnlarged { entity } => {
                entity_outcome(entity.local_id)
            }
            SyncEventKind::MergePerformed { keep, .. } => entity_outcome(*keep),
            SyncEventKind::SplitPerformed { original, .. } => entity_outcome(original.local_id),
            SyncEventKind::EntityRetired { .. } => SyncOutcome::Retired,
            SyncEventKind::RelationshipAdded { relationship } => {
                let mut r = NodeRelationship::of(iid, relationship);
                r.source = self.facts.resolve(r.source);
                r.target = self.facts.resolve(r.target);
                if self.derived.parked.contains(&r) {
                    return SyncOutcome::Parked;
                }
                let conflict = self
                    .open_by_issue
                    .iter()
                    .find(|(k, _)| k.relationship.as_ref() == Some(&r));
                match conflict {
                    Some((_, id)) => SyncOutcome::ActionRequired { request_id: *id },
                    None if self.facts.relationships.contains(&r) => SyncOutcome::Linked,
                    None => SyncOutcome::Retired,
                }
            }
        }
    }

    fn recompute(&mut self, at: DateTime<Utc>) {
        self.derived = derive(&self.metamodel, &self.facts, &self.decisions, &self.expired, &self.derived);
        let parked = &self.derived.parked;
        self.parked_since.retain(|r, _| parked.contains(r));
        for r in parked {
            self.parked_since.entry(r.clone()).or_insert(at);
        }
        self.expired.retain(|r| parked.contains(r));
        self.reconcile_requests(at);
    }

    fn reconcile_requests(&mut self, at: DateTime<Utc>) {
        let issues = std::mem::take(&mut self.derived.issues);
        let current: BTreeSet<&IssueKey> = issues.iter().map(|i| &i.key).collect();
        let gone: Vec<IssueKey> = self
            .open_by_issue
            .keys()
            .filter(|k| !current.contains(k))
            .cloned()
            .collect();
        for key in gone {
            let id = self.open_by_issue.remove(&key).expect("listed");
            if let Some(mut r) = self.requests.remove(&id) {
                r.history.push(HistoryEntry {
                    at,
                    actor: SYSTEM_ACTOR.into(),
                    action: "withdrawn".into(),
                    status: RequestStatus::Rejected,
                });
                self.withdrawn.push(r);
            }
        }
        for issue in &issues {
            let mut ids: Vec<GlobalId> = issue
                .id_nodes
                .iter()
                .filter_map(|n| self.derived.binding.get(n).copied())
                .collect();
            ids.sort();
            ids.dedup();
            match self.open_by_issue.get(&issue.key) {
                Some(id) => {
                    let r = self.requests.get_mut(id).expect("open request");
                    r.ids = ids;
                    r.data = issue.data.clone();
                    r.message = issue.message.clone();
                }
                None => {
                    let id = RequestId(self.next_request);
                    self.next_request += 1;
                    self.requests.insert(
                        id,
                        ActionRequest {
                            request_id: id,
                            ids,
                            data: issue.data.clone(),
                            iid: issue.iid,
                            message: issue.message.clone(),
                            history: vec![HistoryEntry {
                                at,
                                actor: SYSTEM_ACTOR.into(),
                                action: "opened".into(),
                                status: RequestStatus::Open,
                            }],
                            issue: issue.key.clone(),
                        },
                    );
                    self.open_by_issue.insert(issue.key.clone(), id);
                }
            }
        }
        self.derived.issues = issues;
    }

    /// Turns relationships parked longer than the configured TTL into
    /// action requests.
    pub fn expire_parked(&mut self) -> Result<usize, FederationError> {
        let at = self.now();
        self.log(&WalRecord::Expire { at })?;
        Ok(self.apply_expire(at))
    }

    fn apply_expire(&mut self, at: DateTime<Utc>) -> usize {
        let ttl = Duration::seconds(self.config.parked_ttl_secs);
        let newly: Vec<NodeRelationship> = self
            .parked_since
            .iter()
            .filter(|(r, since)| **since + ttl <= at && !self.expired.contains(*r))
            .map(|(r, _)| r.clone())
            .collect();
        let n = newly.len();
        if n > 0 {
            self.expired.extend(newly);
            self.recompute(at);
        }
        n
    }

    pub fn parked(&self) -> impl Iterator<Item = (&NodeRelationship, &DateTime<Utc>)> {
        self.parked_since.iter()
    }

    // ---- action requests -----------------------------------------------

    pub fn requests(&self, status: Option<RequestStatus>) -> Vec<&ActionRequest> {
        self.requests
            .values()
            .filter(|r| status.is_none_or(|s| r.status() == s))
            .collect()
    }

    pub fn request(&self, id: RequestId) -> Option<&ActionRequest> {
        self.requests.get(&id)
    }

    pub fn withdrawn(&self) -> &[ActionRequest] {
        &self.withdrawn
    }

    fn authorize(&self, actor: &str) -> Result<(), FederationError> {
        if self.config.masters.contains(actor) {
            Ok(())
        } else {
            Err(FederationError::UnauthorizedActor(actor.to_string()))
        }
    }

    fn open_request(&self, id: RequestId) -> Result<&ActionRequest, FederationError> {
        let r = self.requests.get(&id).ok_or(FederationError::UnknownRequest(id.0))?;
        if r.status().is_terminal() {
            return Err(FederationError::AlreadyResolved(id.0));
        }
        Ok(r)
    }

    /// Marks a request as being worked on.
    pub fn claim_request(&mut self, id: RequestId, actor: &str) -> Result<(), FederationError> {
        self.authorize(actor)?;
        self.open_request(id)?;
        let at = self.now();
        self.log(&WalRecord::Claim {
            request_id: id,
            actor: actor.to_string(),
            at,
        })?;
        self.apply_claim(id, actor, at)
    }

    fn apply_claim(&mut self, id: RequestId, actor: &str, at: DateTime<Utc>) -> Result<(), FederationError> {
        self.open_request(id)?;
        let r = self.requests.get_mut(&id).expect("checked");
        r.history.push(HistoryEntry {
            at,
            actor: actor.to_string(),
            action: "claimed".into(),
            status: RequestStatus::InProgress,
        });
        Ok(())
    }

    pub fn resolve_action_request(
        &mut self,
        id: RequestId,
        decision: &Decision,
        actor: &str,
    ) -> Result<Resolution, FederationError> {
        self.authorize(actor)?;
        let decisions = self.validate_decision(id, decision)?;
        let at = self.now();
        self.log(&WalRecord::Decision {
            request_id: id,
            decision: decision.clone(),
            actor: actor.to_string(),
            at,
        })?;
        self.apply_decision(id, decision, actor, decisions, at);
        let request = self.requests[&id].clone();
        let mut bindings = BTreeMap::new();
        for n in request.nodes() {
            if let Some(g) = self.derived.binding.get(&self.facts.resolve(n)) {
                bindings.insert(*g, self.derived.entities[g].nodes());
            }
        }
        Ok(Resolution { request, bindings })
    }

    fn effective_attributes(&self, n: NodeRef) -> Option<AttributeMap> {
        let snap = self.facts.snapshots.get(&n)?;
        let mut raw = snap.attributes.clone();
        if let Some(p) = self.decisions.patches.get(&n) {
            for (k, v) in p {
                match v {
                    Some(v) => raw.insert(k.clone(), v.clone()),
                    None => raw.remove(k),
                };
            }
        }
        self.metamodel.validate_attributes(&snap.type_name, &raw).ok()
    }

    /// Checks a decision and returns the decision set it would produce.
    fn validate_decision(&self, id: RequestId, decision: &Decision) -> Result<Decisions, FederationError> {
        let request = self.open_request(id)?;
        let invalid = |m: String| FederationError::InvalidDecision(m);
        let kind = request.issue.kind;
        let members: Vec<NodeRef> = request.issue.members.iter().map(|n| self.facts.resolve(*n)).collect();
        let mut d = self.decisions.clone();
        match decision {
            Decision::Merge { global_id } => {
                if !matches!(kind, IssueKind::PartialMatch | IssueKind::KeyConflict) {
                    return Err(invalid(format!("merge does not apply to {kind:?}")));
                }
                let gid = self.resolve_gid(*global_id).ok_or_else(|| invalid(format!("no global entity {global_id}")))?;
                let target = &self.derived.entities[&gid];
                if target.type_name != request.data.type_name {
                    return Err(invalid("type mismatch".into()));
                }
                let incoming = self
                    .metamodel
                    .validate_attributes(&request.data.type_name, &request.data.attributes)
                    .map_err(|e| invalid(e.to_string()))?;
                let clashes = contradictory_attributes(&target.attributes, &incoming);
                if !clashes.is_empty() {
                    return Err(invalid(format!("contradictory attributes {clashes:?}")));
                }
                let anchor = target.nodes()[0];
                for m in &members {
                    for t in target.nodes() {
                        d.cannot_link.remove(&ordered(*m, t));
                    }
                    if *m != anchor {
                        d.must_link.insert(ordered(*m, anchor));
                    }
                }
            }
            Decision::CreateNew => match kind {
                IssueKind::PartialMatch => {
                    for m in &members {
                        for r in &request.issue.related {
                            let r = self.facts.resolve(*r);
                            d.must_link.remove(&ordered(*m, r));
                            d.cannot_link.insert(ordered(*m, r));
                        }
                    }
                }
                IssueKind::RelationshipConflict | IssueKind::ParkedRelationship => {
                    let rel = request.issue.relationship.clone().expect("relationship issue");
                    d.excluded.insert(rel);
                }
                _ => return Err(invalid(format!("create_new does not apply to {kind:?}; fix the attributes"))),
            },
            Decision::Split { groups } => {
                let involved: BTreeSet<NodeRef> = request.nodes().into_iter().map(|n| self.facts.resolve(n)).collect();
                let mut seen = BTreeSet::new();
                let groups: Vec<Vec<NodeRef>> = groups
                    .iter()
                    .map(|g| g.iter().map(|n| self.facts.resolve(*n)).collect())
                    .collect();
                for g in &groups {
                    if g.is_empty() {
                        return Err(invalid("empty group".into()));
                    }
                    for n in g {
                        if !seen.insert(*n) {
                            return Err(invalid(format!("{n} appears twice")));
                        }
                    }
                }
                if groups.len() < 2 || seen != involved {
                    return Err(invalid("groups must partition the involved entities".into()));
                }
                self.check_split_keys(&groups)?;
                for (i, a) in groups.iter().enumerate() {
                    for w in a.windows(2) {
                        d.must_link.insert(ordered(w[0], w[1]));
                    }
                    for b in &groups[i + 1..] {
                        for x in a {
                            for y in b {
                                d.must_link.remove(&ordered(*x, *y));
                                d.cannot_link.insert(ordered(*x, *y));
                            }
                        }
                    }
                }
            }
            Decision::FixAttributes { edits } => {
                if edits.is_empty() {
                    return Err(invalid("no edits".into()));
                }
                let involved: BTreeSet<NodeRef> = request.nodes().into_iter().map(|n| self.facts.resolve(n)).collect();
                for e in edits {
                    let n = self.facts.resolve(e.node);
                    if !involved.contains(&n) {
                        return Err(invalid(format!("{} is not involved in the request", e.node)));
                    }
                    let snap = self.facts.snapshots.get(&n).ok_or_else(|| invalid(format!("{n} is gone")))?;
                    let t = self.metamodel.require_type(&snap.type_name).map_err(|e| invalid(e.to_string()))?;
                    let def = t
                        .attribute(&e.attribute)
                        .ok_or_else(|| invalid(format!("unknown attribute `{}`", e.attribute)))?;
                    if let Some(v) = &e.value {
                        Metamodel::validate_value(def, v).map_err(|e| invalid(e.to_string()))?;
                    }
                    d.patches.entry(n).or_default().insert(e.attribute.clone(), e.value.clone());
                }
            }
        }
        Ok(d)
    }

    /// Groups of a split may not share a complete key value, since keys
    /// identify a single entity.
    fn check_split_keys(&self, groups: &[Vec<NodeRef>]) -> Result<(), FederationError> {
        let mut owner: BTreeMap<(String, usize, String), usize> = BTreeMap::new();
        for (gi, g) in groups.iter().enumerate() {
            for n in g {
                let (Some(snap), Some(attrs)) = (self.facts.snapshots.get(n), self.effective_attributes(*n)) else {
                    continue;
                };
                let Some(t) = self.metamodel.entity_type(&snap.type_name) else {
                    continue;
                };
                for (idx, key) in t.complete_keys(&attrs) {
                    let k = (snap.type_name.clone(), idx, key_string(key, &attrs));
                    match owner.get(&k) {
                        Some(other) if *other != gi => {
                            return Err(FederationError::InvalidDecision(format!(
                                "groups {other} and {gi} share an identifier; fix the attributes instead"
                            )))
                        }
                        _ => {
                            owner.insert(k, gi);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_decision(
        &mut self,
        id: RequestId,
        decision: &Decision,
        actor: &str,
        decisions: Decisions,
        at: DateTime<Utc>,
    ) {
        self.decisions = decisions;
        let r = self.requests.get_mut(&id).expect("validated");
        r.history.push(HistoryEntry {
            at,
            actor: actor.to_string(),
            action: decision.label().into(),
            status: RequestStatus::Resolved,
        });
        let key = r.issue.clone();
        self.open_by_issue.remove(&key);
        self.recompute(at);
    }

    // ---- global register -----------------------------------------------

    fn resolve_gid(&self, mut gid: GlobalId) -> Option<GlobalId> {
        let mut hops = 0;
        while !self.derived.entities.contains_key(&gid) {
            gid = *self.derived.forwards.get(&gid)?;
            hops += 1;
            if hops > self.derived.forwards.len() {
                return None;
            }
        }
        Some(gid)
    }

    pub fn global_entity(&self, gid: GlobalId) -> Option<&GlobalEntity> {
        self.resolve_gid(gid).and_then(|g| self.derived.entities.get(&g))
    }

    pub fn global_entities(&self) -> impl Iterator<Item = &GlobalEntity> {
        self.derived.entities.values()
    }

    pub fn map_global_local(&self, gid: GlobalId) -> Result<Vec<(Iid, LocalId)>, FederationError> {
        let e = self
            .global_entity(gid)
            .ok_or(FederationError::UnknownGlobalEntity(gid))?;
        Ok(e.local_bindings.iter().map(|b| (b.iid, b.local_id)).collect())
    }

    pub fn binding_of(&self, node: NodeRef) -> Option<GlobalId> {
        self.derived.binding.get(&self.facts.resolve(node)).copied()
    }

    pub fn bindings_for(&self, iid: Iid) -> BTreeMap<LocalId, GlobalId> {
        self.derived
            .binding
            .range(NodeRef::new(iid, LocalId(0))..=NodeRef::new(iid, LocalId(u64::MAX)))
            .map(|(n, g)| (n.local_id, *g))
            .collect()
    }

    /// Global entities compatible with a partial attribute set.
    pub fn global_candidates(&self, type_name: &str, partial: &AttributeMap) -> Vec<(GlobalId, Candidate)> {
        self.derived
            .register
            .find_candidates(type_name, partial, &[])
            .into_iter()
            .filter_map(|c| self.derived.scratch_to_gid.get(&c.local_id).map(|g| (*g, c)))
            .collect()
    }

    // ---- audits and comparison -----------------------------------------

    /// Every instance's applied sequence is exactly `1..=watermark`.
    pub fn audit_watermarks(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        for (iid, w) in &self.watermarks {
            let applied = self.applied.get(iid).map(Vec::as_slice).unwrap_or(&[]);
            let expected: Vec<u64> = (1..=*w).collect();
            if applied != expected.as_slice() {
                let mut seen = BTreeSet::new();
                let dups: Vec<u64> = applied.iter().filter(|s| !seen.insert(**s)).copied().collect();
                let missing: Vec<u64> = expected.iter().filter(|s| !seen.contains(s)).copied().collect();
                problems.push(format!("instance {iid}: duplicated {dups:?}, missing {missing:?}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    /// Audit sweep: every binding points at a known local entity whose
    /// attributes agree with its global record.
    pub fn audit_bindings(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for (n, g) in &self.derived.binding {
            let Some(local) = self.effective_attributes(*n) else {
                problems.push(format!("{n} bound to {g} but unknown"));
                continue;
            };
            let global = &self.derived.entities[g].attributes;
            let clashes = contradictory_attributes(global, &local);
            if !clashes.is_empty() {
                problems.push(format!("{n} disagrees with {g} on {clashes:?}"));
            }
        }
        problems
    }

    pub fn canonical(&self) -> CanonicalState {
        let anchor = |g: &GlobalId| self.derived.entities[g].nodes()[0];
        let mut entities: Vec<CanonicalEntity> = self
            .derived
            .entities
            .values()
            .map(|e| CanonicalEntity {
                type_name: e.type_name.clone(),
                attributes: e.attributes.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
                bindings: e.nodes(),
                relationships: e
                    .relationships
                    .iter()
                    .map(|r| (r.rel_name.clone(), anchor(&r.source), anchor(&r.target)))
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect(),
            })
            .collect();
        entities.sort_by(|a, b| a.bindings.cmp(&b.bindings));
        let mut requests: Vec<NormalizedRequest> = self
            .requests
            .values()
            .filter(|r| !r.status().is_terminal())
            .map(NormalizedRequest::from)
            .collect();
        requests.sort_by(|a, b| a.issue.cmp(&b.issue));
        CanonicalState {
            entities,
            requests,
            parked: self.derived.parked.iter().cloned().collect(),
        }
    }

    /// Hash over everything the top level stores.
    pub fn state_hash(&self) -> String {
        #[derive(Serialize)]
        struct Everything<'a> {
            directory: &'a InstanceDirectory,
            facts: &'a Facts,
            decisions: &'a Decisions,
            watermarks: &'a BTreeMap<Iid, u64>,
            applied: &'a BTreeMap<Iid, Vec<u64>>,
            entities: &'a BTreeMap<GlobalId, GlobalEntity>,
            forwards: &'a BTreeMap<GlobalId, GlobalId>,
            requests: &'a BTreeMap<RequestId, ActionRequest>,
            withdrawn: &'a [ActionRequest],
            parked_since: Vec<(&'a NodeRelationship, &'a DateTime<Utc>)>,
        }
        let all = Everything {
            directory: &self.directory,
            facts: &self.facts,
            decisions: &self.decisions,
            watermarks: &self.watermarks,
            applied: &self.applied,
            entities: &self.derived.entities,
            forwards: &self.derived.forwards,
            requests: &self.requests,
            withdrawn: &self.withdrawn,
            parked_since: self.parked_since.iter().collect(),
        };
        let bytes = serde_json::to_vec(&all).expect("serializable state");
        hex::encode(Sha256::digest(bytes))
    }
}
