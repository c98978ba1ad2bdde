//! Documents, sections, chunks, span annotations and their indexes.

mod chunk;
mod index;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use chunk::{chunk, Chunk, ChunkStrategy};
pub use index::tokenize;
use index::InvertedIndex;

use crate::ids::{Iid, LocalId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("document has no text")]
    EmptyDocument,
    #[error("document `{0}` already exists")]
    DuplicateDocId(String),
    #[error("document `{0}` does not exist")]
    UnknownDocument(String),
    #[error("metadata name `{0}` is repeated")]
    DuplicateMetadata(String),
    #[error("section name must not be empty")]
    EmptySectionName,
    #[error("span ({start}, {end}) is outside the document text of {len} characters")]
    SpanOutOfBounds { start: usize, end: usize, len: usize },
    #[error("entity {0} does not exist in this instance")]
    DanglingEntityRef(LocalId),
    #[error("annotation `{0}` does not exist")]
    UnknownAnnotation(String),
    #[error("search needs at least one criterion")]
    EmptyQuery,
    #[error("instance {0} is unreachable")]
    TargetUnreachable(Iid),
    #[error("entity copy failed: {0}")]
    EntityCopyFailed(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub content: String,
    pub chunks: Vec<Chunk>,
    /// Character offset of the section within the full document text.
    pub char_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub instance_id: Iid,
    pub metadata: BTreeMap<String, String>,
    pub sections: Vec<Section>,
}

impl Document {
    pub fn full_text(&self) -> String {
        self.sections.iter().map(|s| s.content.as_str()).collect()
    }

    pub fn char_len(&self) -> usize {
        self.sections.iter().map(|s| s.content.chars().count()).sum()
    }

    /// Section containing the character at `offset`.
    pub fn section_at(&self, offset: usize) -> Option<&Section> {
        self.sections
            .iter()
            .find(|s| offset >= s.char_offset && offset < s.char_offset + s.content.chars().count())
    }
}

/// Section input: name and raw text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionInput {
    pub name: String,
    pub content: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub ann_id: String,
    pub instance_id: Iid,
    pub doc_id: String,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_ref: Option<LocalId>,
    /// Character offsets in the full document text, end exclusive.
    pub span: (usize, usize),
}

/// Everything a target instance needs to store a replica.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentTransfer {
    pub source_iid: Iid,
    pub doc_id: String,
    pub metadata: BTreeMap<String, String>,
    pub sections: Vec<SectionInput>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    #[serde(default)]
    pub text_terms: Vec<String>,
    #[serde(default)]
    pub metadata_filters: BTreeMap<String, String>,
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub entity_ref: Option<LocalId>,
}

impl SearchQuery {
    pub fn is_empty(&self) -> bool {
        self.text_terms.is_empty()
            && self.metadata_filters.is_empty()
            && self.tag.is_none()
            && self.entity_ref.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SearchHit {
    pub doc_id: String,
    /// Occurrences of the query terms.
    pub score: usize,
    /// Term occurrences and matching annotation spans, sorted.
    pub spans: Vec<(usize, usize)>,
}

/// Serializable part of a corpus; indexes are rebuilt on load.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CorpusState {
    pub documents: Vec<Document>,
    pub annotations: Vec<Annotation>,
    pub next_ann: u64,
    #[serde(default)]
    pub replicas: Vec<(Iid, String)>,
    #[serde(default)]
    pub copied_annotations: Vec<((Iid, String), String)>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    iid: Iid,
    documents: BTreeMap<String, Document>,
    annotations: BTreeMap<String, Annotation>,
    next_ann: u64,
    text_index: InvertedIndex,
    metadata_index: BTreeMap<(String, String), BTreeSet<String>>,
    by_doc: BTreeMap<String, BTreeSet<String>>,
    by_tag: BTreeMap<String, BTreeSet<String>>,
    by_entity: BTreeMap<LocalId, BTreeSet<String>>,
    replicas: BTreeSet<(Iid, String)>,
    copied_annotations: BTreeMap<(Iid, String), String>,
}

impl Corpus {
    pub fn new(iid: Iid) -> Self {
        Self {
            iid,
            documents: BTreeMap::new(),
            annotations: BTreeMap::new(),
            next_ann: 1,
            text_index: InvertedIndex::default(),
            metadata_index: BTreeMap::new(),
            by_doc: BTreeMap::new(),
            by_tag: BTreeMap::new(),
            by_entity: BTreeMap::new(),
            replicas: BTreeSet::new(),
            copied_annotations: BTreeMap::new(),
        }
    }

    pub fn iid(&self) -> Iid {
        self.iid
    }

    pub fn document(&self, doc_id: &str) -> Result<&Document, CorpusError> {
        self.documents
            .get(doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument(doc_id.to_string()))
    }

    pub fn documents(&self) -> impl Iterator<Item = &Document> {
        self.documents.values()
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn annotation(&self, ann_id: &str) -> Result<&Annotation, CorpusError> {
        self.annotations
            .get(ann_id)
            .ok_or_else(|| CorpusError::UnknownAnnotation(ann_id.to_string()))
    }

    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.values()
    }

    pub fn annotations_of(&self, doc_id: &str) -> Vec<&Annotation> {
        let mut out: Vec<&Annotation> = self
            .by_doc
            .get(doc_id)
            .into_iter()
            .flatten()
            .map(|a| &self.annotations[a])
            .collect();
        out.sort_by(|a, b| a.span.cmp(&b.span).then(a.ann_id.cmp(&b.ann_id)));
        out
    }

    pub fn annotations_for_entity(&self, id: LocalId) -> Vec<&Annotation> {
        self.by_entity
            .get(&id)
            .into_iter()
            .flatten()
            .map(|a| &self.annotations[a])
            .collect()
    }

    /// Text covered by an annotation.
    pub fn annotated_text(&self, ann: &Annotation) -> Option<String> {
        let doc = self.documents.get(&ann.doc_id)?;
        Some(doc.full_text().chars().skip(ann.span.0).take(ann.span.1 - ann.span.0).collect())
    }

    /// Validates and builds a document without storing it.
    pub fn prepare_document(
        &self,
        doc_id: &str,
        metadata: &[(String, String)],
        sections: &[SectionInput],
        strategy: ChunkStrategy,
    ) -> Result<Document, CorpusError> {
        if self.documents.contains_key(doc_id) {
            return Err(CorpusError::DuplicateDocId(doc_id.to_string()));
        }
        let mut meta = BTreeMap::new();
        for (name, value) in metadata {
            if meta.insert(name.clone(), value.clone()).is_some() {
                return Err(CorpusError::DuplicateMetadata(name.clone()));
            }
        }
        if sections.iter().any(|s| s.name.trim().is_empty()) {
            return Err(CorpusError::EmptySectionName);
        }
        if sections.iter().all(|s| s.content.is_empty()) {
            return Err(CorpusError::EmptyDocument);
        }
        let mut offset = 0;
        let sections = sections
            .iter()
            .map(|s| {
                let section = Section {
                    name: s.name.clone(),
                    content: s.content.clone(),
                    chunks: chunk(&s.content, strategy),
                    char_offset: offset,
                };
                offset += s.content.chars().count();
                section
            })
            .collect();
        Ok(Document {
            doc_id: doc_id.to_string(),
            instance_id: self.iid,
            metadata: meta,
            sections,
        })
    }

    pub fn ingest_document(
        &mut self,
        doc_id: &str,
        metadata: &[(String, String)],
        sections: &[SectionInput],
        strategy: ChunkStrategy,
    ) -> Result<&Document, CorpusError> {
        let doc = self.prepare_document(doc_id, metadata, sections, strategy)?;
        Ok(self.insert_document(doc))
    }

    /// Stores a document built by [`Corpus::prepare_document`].
    pub fn insert_document(&mut self, doc: Document) -> &Document {
        let doc_id = doc.doc_id.clone();
        self.text_index.add(&doc_id, &doc.full_text());
        for (name, value) in &doc.metadata {
            self.metadata_index
                .entry((name.clone(), crate::metamodel::fold(value)))
                .or_default()
                .insert(doc_id.clone());
        }
        self.documents.insert(doc_id.clone(), doc);
        &self.documents[&doc_id]
    }

    /// Removes a document and its annotations; used to undo a failed ingest.
    pub fn remove_document(&mut self, doc_id: &str) -> Option<Document> {
        let doc = self.documents.remove(doc_id)?;
        self.text_index.remove(doc_id);
        for (name, value) in &doc.metadata {
            let key = (name.clone(), crate::metamodel::fold(value));
            if let Some(set) = self.metadata_index.get_mut(&key) {
                set.remove(doc_id);
                if set.is_empty() {
                    self.metadata_index.remove(&key);
                }
            }
        }
        for ann in self.by_doc.remove(doc_id).unwrap_or_default() {
            if let Some(a) = self.annotations.remove(&ann) {
                self.unindex_annotation(&a);
            }
        }
        self.replicas.retain(|(_, d)| d != doc_id);
        Some(doc)
    }

    /// Re-cuts every section of a document with a new strategy.
    pub fn rechunk(&mut self, doc_id: &str, strategy: ChunkStrategy) -> Result<&Document, CorpusError> {
        let doc = self
            .documents
            .get_mut(doc_id)
            .ok_or_else(|| CorpusError::UnknownDocument(doc_id.to_string()))?;
        for s in &mut doc.sections {
            s.chunks = chunk(&s.content, strategy);
        }
        Ok(doc)
    }

    /// Checks span and entity reference; `entity_exists` answers for the
    /// local register.
    pub fn check_annotation(
        &self,
        doc_id: &str,
        span: (usize, usize),
        entity_ref: Option<LocalId>,
        entity_exists: impl Fn(LocalId) -> bool,
    ) -> Result<(), CorpusError> {
        let len = self.document(doc_id)?.char_len();
        if span.0 >= span.1 || span.1 > len {
            return Err(CorpusError::SpanOutOfBounds {
                start: span.0,
                end: span.1,
                len,
            });
        }
        if let Some(e) = entity_ref {
            if !entity_exists(e) {
                return Err(CorpusError::DanglingEntityRef(e));
            }
        }
        Ok(())
    }

    pub fn add_annotation(
        &mut self,
        doc_id: &str,
        tag: &str,
        span: (usize, usize),
        entity_ref: Option<LocalId>,
        entity_exists: impl Fn(LocalId) -> bool,
    ) -> Result<&Annotation, CorpusError> {
        self.check_annotation(doc_id, span, entity_ref, entity_exists)?;
        let ann_id = format!("a{}", self.next_ann);
        self.next_ann += 1;
        let ann = Annotation {
            ann_id: ann_id.clone(),
            instance_id: self.iid,
            doc_id: doc_id.to_string(),
            tag: tag.to_string(),
            entity_ref,
            span,
        };
        self.index_annotation(&ann);
        self.annotations.insert(ann_id.clone(), ann);
        Ok(&self.annotations[&ann_id])
    }

    /// Id the next annotation will receive.
    pub fn next_annotation_id(&self) -> String {
        format!("a{}", self.next_ann)
    }

    pub(crate) fn annotation_counter(&self) -> u64 {
        self.next_ann
    }

    /// Rewinds the id counter after an aborted ingest.
    pub(crate) fn rewind_annotation_counter(&mut self, next: u64) {
        self.next_ann = next;
    }

    /// Points an annotation at another entity (or unbinds it).
    pub fn bind_annotation(&mut self, ann_id: &str, entity_ref: Option<LocalId>) -> Result<(), CorpusError> {
        let mut ann = self.annotation(ann_id)?.clone();
        self.unindex_annotation(&ann);
        ann.entity_ref = entity_ref;
        self.index_annotation(&ann);
        self.annotations.insert(ann_id.to_string(), ann);
        Ok(())
    }

    /// Re-points every annotation of `from` to `to`.
    pub fn rebind_entity(&mut self, from: LocalId, to: LocalId) {
        let ids: Vec<String> = self.by_entity.get(&from).into_iter().flatten().cloned().collect();
        for id in ids {
            let _ = self.bind_annotation(&id, Some(to));
        }
    }

    pub fn remove_annotation(&mut self, ann_id: &str) -> Result<Annotation, CorpusError> {
        let ann = self
            .annotations
            .remove(ann_id)
            .ok_or_else(|| CorpusError::UnknownAnnotation(ann_id.to_string()))?;
        self.unindex_annotation(&ann);
        Ok(ann)
    }

    fn index_annotation(&mut self, a: &Annotation) {
        self.by_doc.entry(a.doc_id.clone()).or_default().insert(a.ann_id.clone());
        self.by_tag.entry(a.tag.clone()).or_default().insert(a.ann_id.clone());
        if let Some(e) = a.entity_ref {
            self.by_entity.entry(e).or_default().insert(a.ann_id.clone());
        }
    }

    fn unindex_annotation(&mut self, a: &Annotation) {
        if let Some(s) = self.by_doc.get_mut(&a.doc_id) {
            s.remove(&a.ann_id);
        }
        if let Some(s) = self.by_tag.get_mut(&a.tag) {
            s.remove(&a.ann_id);
        }
        if let Some(e) = a.entity_ref {
            if let Some(s) = self.by_entity.get_mut(&e) {
                s.remove(&a.ann_id);
                if s.is_empty() {
                    self.by_entity.remove(&e);
                }
            }
        }
    }

    /// Conjunctive search ordered by (score desc, doc_id asc).
    pub fn search(&self, query: &SearchQuery) -> Result<Vec<SearchHit>, CorpusError> {
        if query.is_empty() {
            return Err(CorpusError::EmptyQuery);
        }
        let mut candidates: Option<BTreeSet<String>> = None;
        let mut narrow = |set: BTreeSet<String>| {
            candidates = Some(match candidates.take() {
                Some(c) => c.intersection(&set).cloned().collect(),
                None => set,
            });
        };

        let terms: Vec<String> = query.text_terms.iter().flat_map(|t| tokenize(t)).map(|t| t.0).collect();
        if !query.text_terms.is_empty() {
            if terms.is_empty() {
                return Ok(vec![]);
            }
            for t in &terms {
                narrow(self.text_index.docs_with(t));
            }
        }
        for (name, value) in &query.metadata_filters {
            narrow(
                self.metadata_index
                    .get(&(name.clone(), crate::metamodel::fold(value)))
                    .cloned()
                    .unwrap_or_default(),
            );
        }
        let matching_ann = |a: &Annotation| {
            query.tag.as_ref().is_none_or(|t| &a.tag == t)
                && query.entity_ref.is_none_or(|e| a.entity_ref == Some(e))
        };
        let ann_filter = query.tag.is_some() || query.entity_ref.is_some();
        if ann_filter {
            let pool: BTreeSet<String> = match (&query.entity_ref, &query.tag) {
                (Some(e), _) => self.by_entity.get(e).cloned().unwrap_or_default(),
                (None, Some(t)) => self.by_tag.get(t).cloned().unwrap_or_default(),
                (None, None) => unreachable!(),
            };
            narrow(
                pool.iter()
                    .map(|a| &self.annotations[a])
                    .filter(|a| matching_ann(a))
                    .map(|a| a.doc_id.clone())
                    .collect(),
            );
        }

        let mut hits: Vec<SearchHit> = candidates
            .unwrap_or_default()
            .into_iter()
            .map(|doc_id| {
                let mut spans = Vec::new();
                let mut score = 0;
                for t in &terms {
                    let occ = self.text_index.occurrences(t, &doc_id);
                    score += occ.len();
                    spans.extend(occ);
                }
                if ann_filter {
                    spans.extend(
                        self.annotations_of(&doc_id)
                            .into_iter()
                            .filter(|a| matching_ann(a))
                            .map(|a| a.span),
                    );
                }
                spans.sort();
                spans.dedup();
                SearchHit { doc_id, score, spans }
            })
            .collect();
        hits.sort_by(|a, b| b.score.cmp(&a.score).then(a.doc_id.cmp(&b.doc_id)));
        Ok(hits)
    }

    // ---- replication ---------------------------------------------------

    pub fn export_document(&self, doc_id: &str) -> Result<DocumentTransfer, CorpusError> {
        let doc = self.document(doc_id)?;
        Ok(DocumentTransfer {
            source_iid: self.iid,
            doc_id: doc.doc_id.clone(),
            metadata: doc.metadata.clone(),
            sections: doc
                .sections
                .iter()
                .map(|s| SectionInput {
                    name: s.name.clone(),
                    content: s.content.clone(),
                })
                .collect(),
        })
    }

    /// Stores a replica; repeated deliveries return the stored copy.
    pub fn receive_replica(
        &mut self,
        transfer: &DocumentTransfer,
        strategy: ChunkStrategy,
    ) -> Result<&Document, CorpusError> {
        if transfer.source_iid == self.iid {
            return Err(CorpusError::DuplicateDocId(transfer.doc_id.clone()));
        }
        let key = (transfer.source_iid, transfer.doc_id.clone());
        if self.replicas.contains(&key) {
            return self.document(&transfer.doc_id);
        }
        let metadata: Vec<(String, String)> = transfer
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let doc = self.prepare_document(&transfer.doc_id, &metadata, &transfer.sections, strategy)?;
        self.replicas.insert(key);
        Ok(self.insert_document(doc))
    }

    pub fn is_replica(&self, source: Iid, doc_id: &str) -> bool {
        self.replicas.contains(&(source, doc_id.to_string()))
    }

    /// Local copy of an annotation received from another instance.
    pub fn copied_annotation(&self, source: Iid, ann_id: &str) -> Option<&Annotation> {
        self.copied_annotations
            .get(&(source, ann_id.to_string()))
            .and_then(|a| self.annotations.get(a))
    }

    pub fn record_copied_annotation(&mut self, source: Iid, source_ann: &str, local_ann: &str) {
        self.copied_annotations
            .insert((source, source_ann.to_string()), local_ann.to_string());
    }

    // ---- persistence ---------------------------------------------------

    pub fn state(&self) -> CorpusState {
        CorpusState {
            documents: self.documents.values().cloned().collect(),
            annotations: self.annotations.values().cloned().collect(),
            next_ann: self.next_ann,
            replicas: self.replicas.iter().cloned().collect(),
            copied_annotations: self
                .copied_annotations
                .iter()
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn from_state(iid: Iid, state: CorpusState) -> Self {
        let mut c = Corpus::new(iid);
        for d in state.documents {
            c.insert_document(d);
        }
        for a in state.annotations {
            c.index_annotation(&a);
            c.annotations.insert(a.ann_id.clone(), a);
        }
        c.next_ann = state.next_ann.max(1);
        c.replicas = state.replicas.into_iter().collect();
        c.copied_annotations = state.copied_annotations.into_iter().collect();
        c
    }
}

#[cfg(test)]
mod tests;
