//! Document ingestion: store, annotate, upsert mentioned entities, bind
//! annotations. Each document commits as a whole or not at all.

mod gazetteer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

pub use gazetteer::{AnnotationDraft, Gazetteer, GazetteerRule, RuleSet};

use crate::corpus::{CorpusError, SectionInput};
use crate::district::{District, PendingReason};
use crate::entity_register::{
    Mention, MentionInput, MentionRelationship, RegisterError, Role, UpsertOutcome, Validity,
};
use crate::federation::events::SyncEvent;
use crate::ids::LocalId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error("rule {index}: {message}")]
    InvalidRule { index: usize, message: String },
    #[error("unknown rule set `{0}`")]
    UnknownRuleSet(String),
    #[error("annotation {index}: {message}")]
    InvalidAnnotation { index: usize, message: String },
    #[error("rule configuration: {0}")]
    Config(String),
    #[error("injected failure after stage {0:?}")]
    InjectedFault(Stage),
}

/// Pre-annotated input document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestDocument {
    pub doc_id: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    pub sections: Vec<SectionInput>,
    #[serde(default)]
    pub annotations: Vec<AnnotationInput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationInput {
    pub tag: String,
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity: Option<EntityInput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityInput {
    #[serde(rename = "type")]
    pub type_name: String,
    #[serde(default)]
    pub attributes: BTreeMap<String, Json>,
    #[serde(default)]
    pub relationships: Vec<RelationshipInput>,
}

/// A relationship of an annotated entity. The other end is either another
/// annotation of the same document (by index) or an existing local entity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationshipInput {
    pub rel_name: String,
    #[serde(default = "default_role")]
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_id: Option<LocalId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validity: Option<Validity>,
}

fn default_role() -> Role {
    Role::Source
}

/// Pipeline stages, in order. Used for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Annotate,
    Upsert,
    Bind,
    Commit,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Ingest, Stage::Annotate, Stage::Upsert, Stage::Bind, Stage::Commit];
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PipelineOptions {
    /// Fail right after this stage, as if it had crashed.
    pub fail_after: Option<Stage>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnotationResult {
    pub ann_id: String,
    pub tag: String,
    pub span: (usize, usize),
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entity_ref: Option<LocalId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<UpsertOutcome>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pending: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineReport {
    pub doc_id: String,
    pub annotations: Vec<AnnotationResult>,
    pub relationship_errors: Vec<String>,
    pub events: Vec<SyncEvent>,
}

/// Turns annotator drafts into pipeline input. Drafts whose tag is an
/// entity type and that carry attributes become entity mentions; the rest
/// stay type-only annotations.
pub fn drafts_to_inputs(district: &District, drafts: &[AnnotationDraft]) -> Vec<AnnotationInput> {
    drafts
        .iter()
        .map(|d| AnnotationInput {
            tag: d.tag.clone(),
            start: d.span.0,
            end: d.span.1,
            entity: (district.metamodel().entity_type(&d.tag).is_some() && !d.attributes.is_empty()).then(|| {
                EntityInput {
                    type_name: d.tag.clone(),
                    attributes: d.attributes.clone(),
                    relationships: vec![],
                }
            }),
        })
        .collect()
}

fn check(fault: Option<Stage>, stage: Stage) -> Result<(), IngestError> {
    if fault == Some(stage) {
        Err(IngestError::InjectedFault(stage))
    } else {
        Ok(())
    }
}

/// Runs one document through the pipeline. With `rules`, the document's
/// own annotations are ignored and the annotator output is used instead.
pub fn run_pipeline(
    district: &mut District,
    doc: &IngestDocument,
    rules: Option<&RuleSet>,
    options: PipelineOptions,
) -> Result<PipelineReport, IngestError> {
    let metadata: Vec<(String, String)> = doc.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let prepared = district
        .corpus
        .prepare_document(&doc.doc_id, &metadata, &doc.sections, district.chunk_strategy)?;
    let ann_counter = district.corpus.annotation_counter();
    let seq_before = district.register.last_seq();
    let sp = district.register.savepoint();
    district.corpus.insert_document(prepared);

    let mut pending = Vec::new();
    let result = stages(district, doc, rules, options.fail_after, &mut pending);
    match result {
        Ok(mut report) => {
            for (i, reason, input, candidates) in pending {
                let a = &mut report.annotations[i];
                a.pending = Some(district.add_pending(reason, &doc.doc_id, &a.ann_id, input, &candidates));
            }
            district.register.release(sp);
            report.events = district.register.events_after(seq_before).to_vec();
            Ok(report)
        }
        Err(e) => {
            district.register.rollback_to(sp);
            district.corpus.remove_document(&doc.doc_id);
            district.corpus.rewind_annotation_counter(ann_counter);
            Err(e)
        }
    }
}

type PendingDraft = (usize, PendingReason, MentionInput, Vec<crate::entity_register::Candidate>);

fn stages(
    district: &mut District,
    doc: &IngestDocument,
    rules: Option<&RuleSet>,
    fault: Option<Stage>,
    pending: &mut Vec<PendingDraft>,
) -> Result<PipelineReport, IngestError> {
    check(fault, Stage::Ingest)?;

    let inputs = match rules {
        Some(rs) => {
            let stored = district.corpus.document(&doc.doc_id)?;
            let drafts = rs.annotate(stored);
            drafts_to_inputs(district, &drafts)
        }
        None => doc.annotations.clone(),
    };
    check(fault, Stage::Annotate)?;

    // Annotations are stored unbound first so that mentions can name them.
    let mut results = Vec::with_capacity(inputs.len());
    for (index, a) in inputs.iter().enumerate() {
        let ann = district
            .corpus
            .add_annotation(&doc.doc_id, &a.tag, (a.start, a.end), None, |_| true)
            .map_err(|e| IngestError::InvalidAnnotation {
                index,
                message: e.to_string(),
            })?;
        results.push(AnnotationResult {
            ann_id: ann.ann_id.clone(),
            tag: a.tag.clone(),
            span: ann.span,
            entity_ref: None,
            outcome: None,
            pending: None,
        });
    }

    let mut deferred: Vec<(usize, RelationshipInput)> = Vec::new();
    for (index, a) in inputs.iter().enumerate() {
        let Some(entity) = &a.entity else { continue };
        if entity.attributes.is_empty() {
            continue;
        }
        let mut relationships = Vec::new();
        for r in &entity.relationships {
            let other = match (r.annotation, r.local_id) {
                (Some(j), _) if j >= inputs.len() => {
                    return Err(IngestError::InvalidAnnotation {
                        index,
                        message: format!("relationship points at annotation {j}"),
                    })
                }
                (Some(j), _) if j < index => results[j].entity_ref,
                (Some(_), _) => {
                    deferred.push((index, r.clone()));
                    continue;
                }
                (None, Some(id)) => Some(id),
                (None, None) => {
                    return Err(IngestError::InvalidAnnotation {
                        index,
                        message: "relationship without other end".into(),
                    })
                }
            };
            match other {
                Some(other) => relationships.push(MentionRelationship {
                    rel_name: r.rel_name.clone(),
                    role: r.role,
                    other,
                    validity: r.validity,
                }),
                None => deferred.push((index, r.clone())),
            }
        }
        let input = MentionInput {
            type_name: entity.type_name.clone(),
            attributes: entity.attributes.clone(),
            relationships,
            mention: Some(Mention {
                doc_id: doc.doc_id.clone(),
                ann_id: results[index].ann_id.clone(),
            }),
        };
        let outcome = district.register.upsert_from_mention(&input)?;
        match &outcome {
            UpsertOutcome::Ambiguous { candidates } => {
                pending.push((index, PendingReason::Ambiguous, input.clone(), candidates.clone()));
            }
            UpsertOutcome::Conflict { .. } => {
                pending.push((index, PendingReason::Conflict, input.clone(), vec![]));
            }
            _ => {}
        }
        results[index].entity_ref = outcome.local_id();
        results[index].outcome = Some(outcome);
    }
    check(fault, Stage::Upsert)?;

    for r in &results {
        if r.entity_ref.is_some() {
            district.corpus.bind_annotation(&r.ann_id, r.entity_ref)?;
        }
    }
    let mut relationship_errors = Vec::new();
    for (index, r) in deferred {
        let here = results[index].entity_ref;
        let there = r.annotation.and_then(|j| results[j].entity_ref);
        let (Some(here), Some(there)) = (here, there) else {
            relationship_errors.push(format!("annotation {index}: `{}` has an unbound end", r.rel_name));
            continue;
        };
        let (source, target) = match r.role {
            Role::Source => (here, there),
            Role::Target => (there, here),
        };
        if let Err(e) = district.register.add_relationship(&r.rel_name, source, target, r.validity) {
            relationship_errors.push(format!("annotation {index}: {e}"));
        }
    }
    check(fault, Stage::Bind)?;
    check(fault, Stage::Commit)?;

    Ok(PipelineReport {
        doc_id: doc.doc_id.clone(),
        annotations: results,
        relationship_errors,
        events: Vec::new(),
    })
}

#[cfg(test)]
mod tests;
