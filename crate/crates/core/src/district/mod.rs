//! One district instance: entity register, corpus and permission tables,
//! plus what it knows of the federation (its global bindings and the
//! watermark the top level acknowledged).

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access_control::{AccessControl, PermissionTables};
use crate::corpus::{Annotation, ChunkStrategy, Corpus, CorpusError, CorpusState};
use crate::entity_register::{
    Candidate, DumpError, Entity, EntityRegister, ForeignEntity, MentionInput, RegisterError, SplitPlan,
    UpsertOutcome,
};
use crate::federation::events::SyncEvent;
use crate::federation::SyncReport;
use crate::ids::{GlobalId, Iid, LocalId, NodeRef};
use crate::metamodel::Metamodel;

#[derive(Debug, Error)]
pub enum DistrictError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error("unknown pending item {0}")]
    UnknownPending(u64),
    #[error("state file: {0}")]
    State(String),
}

impl From<DumpError> for DistrictError {
    fn from(e: DumpError) -> Self {
        DistrictError::State(e.to_string())
    }
}

/// Why a mention could not be bound during ingestion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PendingReason {
    Ambiguous,
    Conflict,
}

/// A mention waiting for a person to pick its entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendingItem {
    pub id: u64,
    pub reason: PendingReason,
    pub doc_id: String,
    pub ann_id: String,
    pub input: MentionInput,
    pub candidates: Vec<LocalId>,
}

/// How a pending mention is settled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "choice", rename_all = "snake_case")]
pub enum PendingChoice {
    Attach { local_id: LocalId },
    CreateNew,
    Dismiss,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DistrictState {
    iid: Iid,
    register: String,
    corpus: CorpusState,
    tables: PermissionTables,
    pending: Vec<PendingItem>,
    next_pending: u64,
    global: Vec<(LocalId, GlobalId)>,
    acked: u64,
}

#[derive(Clone, Debug)]
pub struct District {
    iid: Iid,
    metamodel: Arc<Metamodel>,
    pub(crate) register: EntityRegister,
    pub(crate) corpus: Corpus,
    pub(crate) access: AccessControl,
    pub(crate) pending: BTreeMap<u64, PendingItem>,
    pub(crate) next_pending: u64,
    global: BTreeMap<LocalId, GlobalId>,
    acked: u64,
    pub chunk_strategy: ChunkStrategy,
}

impl District {
    pub fn new(iid: Iid, metamodel: Arc<Metamodel>, tables: &PermissionTables) -> Self {
        Self {
            iid,
            register: EntityRegister::new(iid, metamodel.clone()),
            corpus: Corpus::new(iid),
            access: AccessControl::new(iid, tables, &metamodel),
            metamodel,
            pending: BTreeMap::new(),
            next_pending: 1,
            global: BTreeMap::new(),
            acked: 0,
            chunk_strategy: ChunkStrategy::Paragraph,
        }
    }

    pub fn iid(&self) -> Iid {
        self.iid
    }

    pub fn metamodel(&self) -> &Arc<Metamodel> {
        &self.metamodel
    }

    pub fn register(&self) -> &EntityRegister {
        &self.register
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn access(&self) -> &AccessControl {
        &self.access
    }

    pub fn access_mut(&mut self) -> &mut AccessControl {
        &mut self.access
    }

    pub fn entity(&self, id: LocalId) -> Option<&Entity> {
        self.register.get(id)
    }

    // ---- federation bookkeeping -----------------------------------------

    /// Highest seq the top level has confirmed.
    pub fn acked(&self) -> u64 {
        self.acked
    }

    /// Events not yet confirmed by the top level.
    pub fn unacked_events(&self) -> &[SyncEvent] {
        self.register.events_after(self.acked)
    }

    pub fn global_id(&self, id: LocalId) -> Option<GlobalId> {
        self.global.get(&id).copied()
    }

    pub fn global_bindings(&self) -> &BTreeMap<LocalId, GlobalId> {
        &self.global
    }

    /// Records the top level's answer: watermark and current bindings.
    pub fn apply_sync_report(&mut self, report: &SyncReport) {
        self.acked = self.acked.max(report.watermark);
        self.global = report.bindings.clone();
    }

    /// Lowers the acknowledged seq when the top level reports it holds
    /// less than it once confirmed, so the missing events are resent.
    pub fn rewind_ack(&mut self, to: u64) {
        self.acked = self.acked.min(to);
    }

    /// Swaps the permission tables, keeping this instance's iid.
    pub fn replace_tables(&mut self, tables: &PermissionTables) {
        self.access = AccessControl::new(self.iid, tables, &self.metamodel);
    }

    // ---- entity maintenance ---------------------------------------------

    /// Local merge; annotations of the absorbed entity follow it.
    pub fn merge_entities(&mut self, keep: LocalId, absorb: LocalId) -> Result<Entity, DistrictError> {
        let report = self.register.merge_entities(keep, absorb)?;
        if let Some(absorbed) = report.absorbed {
            self.corpus.rebind_entity(absorbed, report.entity.local_id);
        }
        Ok(report.entity)
    }

    /// Local split; annotations listed on the split-off side move with it.
    pub fn split_entity(&mut self, id: LocalId, plan: &SplitPlan) -> Result<(Entity, Entity), DistrictError> {
        let (kept, split_off) = self.register.split_entity(id, plan)?;
        for m in &plan.split_off.mentions {
            if self.corpus.annotation(&m.ann_id).is_ok() {
                self.corpus.bind_annotation(&m.ann_id, Some(split_off.local_id))?;
            }
        }
        Ok((kept, split_off))
    }

    // ---- pending mentions ---------------------------------------------

    pub fn pending(&self) -> impl Iterator<Item = &PendingItem> {
        self.pending.values()
    }

    pub(crate) fn add_pending(
        &mut self,
        reason: PendingReason,
        doc_id: &str,
        ann_id: &str,
        input: MentionInput,
        candidates: &[Candidate],
    ) -> u64 {
        let id = self.next_pending;
        self.next_pending += 1;
        self.pending.insert(
            id,
            PendingItem {
                id,
                reason,
                doc_id: doc_id.to_string(),
                ann_id: ann_id.to_string(),
                input,
                candidates: candidates.iter().map(|c| c.local_id).collect(),
            },
        );
        id
    }

    /// Settles a pending mention and binds its annotation.
    pub fn resolve_pending(&mut self, id: u64, choice: PendingChoice) -> Result<UpsertOutcome, DistrictError> {
        let item = self.pending.get(&id).cloned().ok_or(DistrictError::UnknownPending(id))?;
        let outcome = match choice {
            PendingChoice::Attach { local_id } => self.register.attach_mention(local_id, &item.input)?,
            PendingChoice::CreateNew => self.register.create_from_mention(&item.input)?,
            PendingChoice::Dismiss => {
                self.pending.remove(&id);
                return Ok(UpsertOutcome::Conflict {
                    report: Default::default(),
                });
            }
        };
        if let Some(local) = outcome.local_id() {
            self.corpus.bind_annotation(&item.ann_id, Some(local))?;
            self.pending.remove(&id);
        }
        Ok(outcome)
    }

    // ---- cross-instance copies --------------------------------------------

    /// Copies an annotation to `target`, replicating its document first when
    /// needed and deep-copying only the directly referenced entity.
    /// Repeated copies return the existing copy.
    pub fn copy_annotation(&self, ann_id: &str, target: &mut District) -> Result<Annotation, DistrictError> {
        let ann = self.corpus.annotation(ann_id)?.clone();
        if let Some(existing) = target.corpus.copied_annotation(self.iid, ann_id) {
            return Ok(existing.clone());
        }
        if !target.corpus.is_replica(self.iid, &ann.doc_id) {
            let transfer = self.corpus.export_document(&ann.doc_id)?;
            let strategy = target.chunk_strategy;
            target.corpus.receive_replica(&transfer, strategy)?;
        }
        let sp = target.register.savepoint();
        let entity_ref = match ann.entity_ref {
            Some(id) => {
                let e = self.register.get(id).ok_or(CorpusError::DanglingEntityRef(id))?;
                let record = ForeignEntity {
                    origin: NodeRef::new(self.iid, e.local_id),
                    type_name: e.type_name.clone(),
                    attributes: e.attributes.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
                };
                match target.register.import_entity(&record) {
                    Ok(local) => Some(local),
                    Err(err) => {
                        target.register.rollback_to(sp);
                        return Err(CorpusError::EntityCopyFailed(err.to_string()).into());
                    }
                }
            }
            None => None,
        };
        let register = &target.register;
        let added = target
            .corpus
            .add_annotation(&ann.doc_id, &ann.tag, ann.span, entity_ref, |id| register.get(id).is_some());
        let copy = match added {
            Ok(a) => a.clone(),
            Err(e) => {
                target.register.rollback_to(sp);
                return Err(e.into());
            }
        };
        if let Some(local) = entity_ref {
            let mention = crate::entity_register::Mention {
                doc_id: copy.doc_id.clone(),
                ann_id: copy.ann_id.clone(),
            };
            target.register.add_mention(local, mention)?;
        }
        target.register.release(sp);
        target.corpus.record_copied_annotation(self.iid, ann_id, &copy.ann_id);
        Ok(copy)
    }

    // ---- persistence ---------------------------------------------------

    fn state(&self) -> DistrictState {
        DistrictState {
            iid: self.iid,
            register: self.register.to_jsonl(),
            corpus: self.corpus.state(),
            tables: self.access.tables(),
            pending: self.pending.values().cloned().collect(),
            next_pending: self.next_pending,
            global: self.global.iter().map(|(l, g)| (*l, *g)).collect(),
            acked: self.acked,
        }
    }

    /// Writes the whole district atomically (temp file, fsync, rename).
    pub fn save(&self, path: &Path) -> Result<(), DistrictError> {
        let err = |e: std::io::Error| DistrictError::State(e.to_string());
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(err)?;
        }
        let tmp = path.with_extension("tmp");
        let bytes = serde_json::to_vec(&self.state()).map_err(|e| DistrictError::State(e.to_string()))?;
        let mut f = std::fs::File::create(&tmp).map_err(err)?;
        f.write_all(&bytes).map_err(err)?;
        f.sync_all().map_err(err)?;
        std::fs::rename(&tmp, path).map_err(err)?;
        Ok(())
    }

    pub fn load(path: &Path, metamodel: Arc<Metamodel>) -> Result<Self, DistrictError> {
        let text = std::fs::read_to_string(path).map_err(|e| DistrictError::State(e.to_string()))?;
        let state: DistrictState = serde_json::from_str(&text).map_err(|e| DistrictError::State(e.to_string()))?;
        let register = EntityRegister::from_jsonl(metamodel.clone(), &state.register)?;
        Ok(Self {
            iid: state.iid,
            register,
            corpus: Corpus::from_state(state.iid, state.corpus),
            access: AccessControl::new(state.iid, &state.tables, &metamodel),
            metamodel,
            pending: state.pending.into_iter().map(|p| (p.id, p)).collect(),
            next_pending: state.next_pending,
            global: state.global.into_iter().collect(),
            acked: state.acked,
            chunk_strategy: ChunkStrategy::Paragraph,
        })
    }
}
