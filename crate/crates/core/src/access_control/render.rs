use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::pseudonym::{mask_value, PSEUDONYM_MIN_VALUE_LEN};
use super::{AccessControl, AccessError, Ownership, Permission, PseudonymScope};
use crate::corpus::Document;
use crate::metamodel::{AttributeMap, Value};

/// A relationship of the viewed entity, with what is known of the far end.
#[derive(Clone, Debug)]
pub struct RelationshipView {
    pub rel_name: String,
    pub outgoing: bool,
    pub other_key: String,
    pub other_type: String,
    pub other_label: String,
    pub other_public: bool,
    pub other_values: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct EntityView {
    /// Stable reference such as `1:22` or `G4`.
    pub key: String,
    pub type_name: String,
    pub privacy_level: u8,
    pub attributes: AttributeMap,
    pub relationships: Vec<RelationshipView>,
}

impl EntityView {
    /// Canonical attribute strings of the entity.
    pub fn values(&self) -> Vec<String> {
        self.attributes.values().flat_map(Value::display_strings).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionView {
    pub doc_id: String,
    pub ann_id: String,
    pub span: (usize, usize),
    pub text: String,
}

/// A document body plus what must be hidden when it is anonymized.
#[derive(Clone, Debug, Default)]
pub struct DocumentView {
    pub doc_id: String,
    pub text: String,
    /// Character spans and their replacements.
    pub redactions: Vec<((usize, usize), String)>,
    /// Values scrubbed anywhere in the anonymized text.
    pub sensitive_values: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ViewRequest {
    pub entity: Option<EntityView>,
    pub mentions: Vec<MentionView>,
    pub documents: Vec<DocumentView>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub mentions: usize,
    pub documents: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedRelationship {
    pub rel_name: String,
    pub outgoing: bool,
    pub other: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedDocument {
    pub doc_id: String,
    pub text: String,
}

/// One entity as a given permission allows it to be seen. Each level's
/// fields are a superset of the fields of every lower level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityRendering {
    pub permission: Permission,
    pub type_name: String,
    pub counts: Counts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<BTreeMap<String, Json>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relationships: Option<Vec<RenderedRelationship>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mentions: Option<Vec<MentionView>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documents: Option<Vec<RenderedDocument>>,
    #[serde(default)]
    pub read_only: bool,
    #[serde(default)]
    pub pseudonymized: bool,
}

impl EntityRendering {
    /// Names of the optional fields that are present.
    pub fn present_fields(&self) -> Vec<&'static str> {
        let mut f = vec!["permission", "type_name", "counts"];
        if self.display_name.is_some() {
            f.push("display_name");
        }
        if self.attributes.is_some() {
            f.push("attributes");
        }
        if self.relationships.is_some() {
            f.push("relationships");
        }
        if self.mentions.is_some() {
            f.push("mentions");
        }
        if self.documents.is_some() {
            f.push("documents");
        }
        f
    }
}

/// Human label from the usual naming attributes.
pub fn display_label(type_name: &str, attributes: &AttributeMap) -> String {
    let get = |k: &str| attributes.get(k).map(|v| v.display_strings().join(", "));
    match (get("name"), get("surname")) {
        (Some(n), Some(s)) => format!("{n} {s}"),
        (Some(n), None) => n,
        (None, Some(s)) => s,
        _ => get("code")
            .or_else(|| attributes.values().next().map(|v| v.display_strings().join(", ")))
            .unwrap_or_else(|| type_name.to_string()),
    }
}

/// Renders an entity view under `permission`.
pub fn apply_visibility(
    request: &ViewRequest,
    permission: Permission,
    scope: &mut PseudonymScope,
) -> Result<EntityRendering, AccessError> {
    if permission == Permission::Denied {
        return Err(AccessError::PermissionDenied);
    }
    let entity = request.entity.as_ref();
    let counts = Counts {
        mentions: request.mentions.len(),
        documents: request.documents.len(),
    };
    let type_name = entity.map(|e| e.type_name.clone()).unwrap_or_default();
    let mut out = EntityRendering {
        permission,
        type_name,
        counts,
        display_name: None,
        attributes: None,
        relationships: None,
        mentions: None,
        documents: None,
        read_only: permission != Permission::FullControl,
        pseudonymized: permission == Permission::ReadAnonymized,
    };
    if permission == Permission::CountOnly {
        return Ok(out);
    }
    let Some(entity) = entity else {
        return Ok(out);
    };
    let clear_relationships = || {
        entity
            .relationships
            .iter()
            .map(|r| RenderedRelationship {
                rel_name: r.rel_name.clone(),
                outgoing: r.outgoing,
                other: r.other_label.clone(),
            })
            .collect::<Vec<_>>()
    };

    match permission {
        Permission::FullControl | Permission::ReadOnly => {
            out.display_name = Some(display_label(&entity.type_name, &entity.attributes));
            out.attributes = Some(entity.attributes.iter().map(|(k, v)| (k.clone(), v.to_json())).collect());
            out.relationships = Some(clear_relationships());
            out.mentions = Some(request.mentions.clone());
            out.documents = Some(
                request
                    .documents
                    .iter()
                    .map(|d| RenderedDocument {
                        doc_id: d.doc_id.clone(),
                        text: d.text.clone(),
                    })
                    .collect(),
            );
        }
        Permission::ReadAnonymized => {
            let values = entity.values();
            let pseudonym = scope.pseudonym(&entity.type_name, &entity.key, &values)?;
            out.display_name = Some(pseudonym.clone());
            out.attributes = Some(entity.attributes.iter().map(|(k, v)| (k.clone(), mask_value(v))).collect());
            let mut rels = Vec::new();
            for r in &entity.relationships {
                let other = if r.other_public {
                    r.other_label.clone()
                } else {
                    scope.pseudonym(&r.other_type, &r.other_key, &r.other_values)?
                };
                rels.push(RenderedRelationship {
                    rel_name: r.rel_name.clone(),
                    outgoing: r.outgoing,
                    other,
                });
            }
            out.relationships = Some(rels);
            out.mentions = Some(
                request
                    .mentions
                    .iter()
                    .map(|m| MentionView {
                        text: pseudonym.clone(),
                        ..m.clone()
                    })
                    .collect(),
            );
            out.documents = Some(
                request
                    .documents
                    .iter()
                    .map(|d| {
                        let mut sensitive = d.sensitive_values.clone();
                        sensitive.extend(values.iter().cloned());
                        RenderedDocument {
                            doc_id: d.doc_id.clone(),
                            text: anonymize_text(&d.text, &d.redactions, &sensitive),
                        }
                    })
                    .collect(),
            );
        }
        Permission::WithoutMentions => {
            out.display_name = Some(display_label(&entity.type_name, &entity.attributes));
            out.attributes = Some(entity.attributes.iter().map(|(k, v)| (k.clone(), v.to_json())).collect());
            out.relationships = Some(clear_relationships());
        }
        Permission::CountOnly | Permission::Denied => unreachable!(),
    }
    Ok(out)
}

/// Applies span redactions, then scrubs sensitive values case-insensitively.
pub fn anonymize_text(text: &str, redactions: &[((usize, usize), String)], sensitive: &[String]) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut spans: Vec<&((usize, usize), String)> = redactions.iter().collect();
    spans.sort_by_key(|r| r.0);
    let mut out = String::new();
    let mut pos = 0;
    for ((start, end), replacement) in spans {
        if *start < pos || *end > chars.len() || start >= end {
            continue;
        }
        out.extend(&chars[pos..*start]);
        out.push_str(replacement);
        pos = *end;
    }
    out.extend(&chars[pos..]);
    match sensitive_regex(sensitive) {
        Some(re) => re.replace_all(&out, "***").into_owned(),
        None => out,
    }
}

fn sensitive_regex(values: &[String]) -> Option<Regex> {
    let mut vals: Vec<&str> = values
        .iter()
        .map(|v| v.trim())
        .filter(|v| v.chars().count() >= PSEUDONYM_MIN_VALUE_LEN)
        .collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by_key(|v| std::cmp::Reverse(v.len()));
    vals.dedup();
    let pattern = vals.iter().map(|v| regex::escape(v)).collect::<Vec<_>>().join("|");
    Regex::new(&format!("(?i){pattern}")).ok()
}

/// Values (of at least the minimum length) found in `response`,
/// compared case-insensitively.
pub fn scan_leaks(response: &str, values: &[String]) -> Vec<String> {
    let hay = response.to_lowercase();
    let mut found: Vec<String> = values
        .iter()
        .filter(|v| v.trim().chars().count() >= PSEUDONYM_MIN_VALUE_LEN)
        .filter(|v| hay.contains(&v.trim().to_lowercase()))
        .cloned()
        .collect();
    found.sort();
    found.dedup();
    found
}

/// An annotation inside a document being rendered.
#[derive(Clone, Debug)]
pub struct AnnotationContext {
    pub span: (usize, usize),
    pub type_name: String,
    pub privacy_level: u8,
    /// Reference of the bound entity, if any.
    pub entity_key: Option<String>,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionRendering {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub anonymized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRendering {
    pub doc_id: String,
    pub metadata: BTreeMap<String, String>,
    pub sections: Vec<SectionRendering>,
    /// Annotation counts per tag.
    pub entity_counts: BTreeMap<String, usize>,
}

/// Renders a document section by section. A section is shown in clear when
/// every annotation in it is readable, anonymized when the weakest one is
/// `ReadAnonymized`, and withheld otherwise. Generic users never see a
/// section annotated with a non-public type.
pub fn render_document(
    ac: &AccessControl,
    user: &str,
    doc: &Document,
    annotations: &[AnnotationContext],
    scope: &mut PseudonymScope,
) -> Result<DocumentRendering, AccessError> {
    let ownership = ac.ownership(user, &doc.doc_id).ok_or(AccessError::PermissionDenied)?;
    let mut entity_counts = BTreeMap::new();
    for a in annotations {
        *entity_counts.entry(a.type_name.clone()).or_insert(0) += 1;
    }
    let mut sections = Vec::new();
    for s in &doc.sections {
        let len = s.content.chars().count();
        let (lo, hi) = (s.char_offset, s.char_offset + len);
        let inside: Vec<&AnnotationContext> = annotations
            .iter()
            .filter(|a| a.span.0 < hi && a.span.1 > lo)
            .collect();
        let weakest = inside
            .iter()
            .map(|a| ac.rule(ownership, a.privacy_level))
            .min()
            .unwrap_or(Permission::FullControl);
        let generic_blocked = ownership == Ownership::Generic && inside.iter().any(|a| a.privacy_level > 0);
        let (text, anonymized) = if generic_blocked || weakest < Permission::ReadAnonymized {
            (None, false)
        } else if weakest >= Permission::ReadOnly {
            (Some(s.content.clone()), false)
        } else {
            let mut redactions = Vec::new();
            let mut sensitive = Vec::new();
            for a in &inside {
                if ac.rule(ownership, a.privacy_level) >= Permission::ReadOnly {
                    continue;
                }
                let replacement = match &a.entity_key {
                    Some(k) => scope.pseudonym(&a.type_name, k, &a.values)?,
                    None => format!("[{}]", a.type_name),
                };
                let start = a.span.0.max(lo) - lo;
                let end = a.span.1.min(hi) - lo;
                redactions.push(((start, end), replacement));
                sensitive.extend(a.values.iter().cloned());
            }
            (Some(anonymize_text(&s.content, &redactions, &sensitive)), true)
        };
        sections.push(SectionRendering {
            name: s.name.clone(),
            text,
            anonymized,
        });
    }
    Ok(DocumentRendering {
        doc_id: doc.doc_id.clone(),
        metadata: doc.metadata.clone(),
        sections,
        entity_counts,
    })
}
