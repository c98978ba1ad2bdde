//! Line-oriented JSON dump and restore of a whole register.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use super::{EntityRegister, Mention, RegisterConfig, RegisterError, RelId, RelationshipInstance, Validity};
use crate::federation::events::SyncEvent;
use crate::ids::{Iid, LocalId, NodeRef};
use crate::metamodel::Metamodel;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Register {
        line: usize,
        #[source]
        source: RegisterError,
    },
    #[error("dump has no header line")]
    MissingHeader,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Header {
        iid: Iid,
        next_id: u64,
        next_rel: u64,
        next_seq: u64,
        #[serde(default)]
        config: RegisterConfig,
    },
    Entity {
        local_id: LocalId,
        type_name: String,
        attributes: BTreeMap<String, Json>,
        #[serde(default)]
        provenance: BTreeSet<Mention>,
    },
    Relationship {
        id: RelId,
        rel_name: String,
        source: LocalId,
        target: LocalId,
        #[serde(default)]
        validity: Option<Validity>,
    },
    Forward {
        from: LocalId,
        to: LocalId,
    },
    Retired {
        local_id: LocalId,
    },
    Import {
        origin: NodeRef,
        local_id: LocalId,
    },
    Event {
        event: SyncEvent,
    },
}

impl EntityRegister {
    /// Serializes the full register, including its event log, one JSON
    /// object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |r: Record| {
            out.push_str(&serde_json::to_string(&r).expect("records serialize"));
            out.push('\n');
        };
        push(Record::Header {
            iid: self.iid,
            next_id: self.next_id,
            next_rel: self.next_rel,
            next_seq: self.next_seq,
            config: self.config,
        });
        for e in self.entities.values() {
            push(Record::Entity {
                local_id: e.local_id,
                type_name: e.type_name.clone(),
                attributes: e.attributes.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
                provenance: e.provenance.clone(),
            });
        }
        for r in self.relationships.values() {
            push(Record::Relationship {
                id: r.id,
                rel_name: r.rel_name.clone(),
                source: r.source,
                target: r.target,
                validity: r.validity,
            });
        }
        for (from, to) in &self.forwards {
            push(Record::Forward { from: *from, to: *to });
        }
        for id in &self.retired {
            push(Record::Retired { local_id: *id });
        }
        for (origin, id) in &self.imports {
            push(Record::Import {
                origin: *origin,
                local_id: *id,
            });
        }
        for ev in &self.events {
            push(Record::Event { event: ev.clone() });
        }
        out
    }

    /// Rebuilds a register from [`EntityRegister::to_jsonl`] output.
    /// Attribute values are re-validated against `metamodel`.
    pub fn from_jsonl(metamodel: Arc<Metamodel>, text: &str) -> Result<Self, DumpError> {
        let mut reg: Option<EntityRegister> = None;
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: Record =
                serde_json::from_str(line).map_err(|source| DumpError::Json { line: line_no, source })?;
            if let Record::Header {
                iid,
                next_id,
                next_rel,
                next_seq,
                config,
            } = record
            {
                let mut r = EntityRegister::with_config(iid, metamodel.clone(), config);
                r.next_id = next_id;
                r.next_rel = next_rel;
                r.next_seq = next_seq;
                reg = Some(r);
                continue;
            }
            let r = reg.as_mut().ok_or(DumpError::MissingHeader)?;
            let wrap = |source| DumpError::Register { line: line_no, source };
            match record {
                Record::Header { .. } => unreachable!(),
                Record::Entity {
                    local_id,
                    type_name,
                    attributes,
                    provenance,
                } => {
                    let attributes = metamodel
                        .validate_attributes(&type_name, &attributes)
                        .map_err(|e| wrap(e.into()))?;
                    let entity = super::Entity {
                        local_id,
                        instance_id: r.iid,
                        type_name,
                        attributes,
                        provenance,
                    };
                    r.index_entity(&entity);
                    r.entities.insert(local_id, entity);
                }
                Record::Relationship {
                    id,
                    rel_name,
                    source,
                    target,
                    validity,
                } => {
                    if metamodel.relationship(&rel_name).is_none() {
                        return Err(wrap(RegisterError::UnknownRelationship(rel_name)));
                    }
                    for end in [source, target] {
                        if !r.entities.contains_key(&end) {
                            return Err(wrap(RegisterError::UnknownEntity(end)));
                        }
                    }
                    r.adjacency.entry(source).or_default().insert(id);
                    r.adjacency.entry(target).or_default().insert(id);
                    r.relationships.insert(
                        id,
                        RelationshipInstance {
                            id,
                            rel_name,
                            source,
                            target,
                            validity,
                        },
                    );
                }
                Record::Forward { from, to } => {
                    r.forwards.insert(from, to);
                }
                Record::Retired { local_id } => {
                    r.retired.insert(local_id);
                }
                Record::Import { origin, local_id } => {
                    r.imports.insert(origin, local_id);
                }
                Record::Event { event } => r.events.push(event),
            }
        }
        reg.ok_or(DumpError::MissingHeader)
    }

    /// The event log alone, one event per line.
    pub fn events_jsonl(&self) -> String {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("events serialize") + "\n")
            .collect()
    }
}
