//! Rule-based annotator standing in for NER/NEL.

use std::collections::BTreeMap;
use std::path::Path;

use regex_automata::meta::Regex as Finder;
use regex_automata::{Anchored, Input, MatchKind};
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use super::IngestError;
use crate::corpus::Document;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazetteerRule {
    pub pattern: String,
    /// Entity type name or plain label.
    pub tag: String,
    /// Attribute name to capture-group index.
    #[serde(default)]
    pub attribute_extractors: BTreeMap<String, usize>,
    /// Treat `pattern` as a literal phrase.
    #[serde(default)]
    pub literal: bool,
    #[serde(default)]
    pub case_insensitive: bool,
}

/// `gazetteer.json`: named rule sets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gazetteer {
    pub rule_sets: BTreeMap<String, Vec<GazetteerRule>>,
}

impl Gazetteer {
    pub fn from_json(text: &str) -> Result<Self, IngestError> {
        serde_json::from_str(text).map_err(|e| IngestError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IngestError> {
        let text = std::fs::read_to_string(path).map_err(|e| IngestError::Config(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn rule_set(&self, name: &str) -> Result<RuleSet, IngestError> {
        let rules = self
            .rule_sets
            .get(name)
            .ok_or_else(|| IngestError::UnknownRuleSet(name.to_string()))?;
        RuleSet::compile(rules)
    }
}

#[derive(Clone, Debug)]
struct CompiledRule {
    rule: GazetteerRule,
    /// Longest-match finder, used anchored at each start position.
    finder: Finder,
    /// Same pattern anchored at both ends, for capture extraction.
    exact: regex::Regex,
}

#[derive(Clone, Debug)]
pub struct RuleSet {
    rules: Vec<CompiledRule>,
}

/// One match, before it is stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationDraft {
    pub tag: String,
    /// Character offsets, end exclusive.
    pub span: (usize, usize),
    pub text: String,
    pub attributes: BTreeMap<String, Json>,
    pub rule: usize,
}

impl RuleSet {
    pub fn compile(rules: &[GazetteerRule]) -> Result<Self, IngestError> {
        let mut compiled = Vec::with_capacity(rules.len());
        for (index, rule) in rules.iter().enumerate() {
            let invalid = |message: String| IngestError::InvalidRule { index, message };
            if rule.pattern.is_empty() || rule.tag.trim().is_empty() {
                return Err(invalid("empty pattern or tag".into()));
            }
            let body = if rule.literal {
                regex::escape(&rule.pattern)
            } else {
                rule.pattern.clone()
            };
            let flags = if rule.case_insensitive { "(?i)" } else { "" };
            let finder = Finder::builder()
                .configure(Finder::config().match_kind(MatchKind::All))
                .build(&format!("{flags}(?:{body})"))
                .map_err(|e| invalid(e.to_string()))?;
            let exact = regex::Regex::new(&format!("{flags}^(?:{body})$")).map_err(|e| invalid(e.to_string()))?;
            for (attr, group) in &rule.attribute_extractors {
                if *group >= exact.captures_len() {
                    return Err(invalid(format!("attribute `{attr}` uses missing group {group}")));
                }
            }
            compiled.push(CompiledRule {
                rule: rule.clone(),
                finder,
                exact,
            });
        }
        Ok(Self { rules: compiled })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Annotates one piece of text. Every rule proposes its longest
    /// non-empty match at every start position; proposals are accepted by
    /// (longer span, earlier start, rule order) unless they overlap an
    /// accepted one. Results are in text order.
    pub fn annotate_text(&self, text: &str) -> Vec<AnnotationDraft> {
        let starts: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        let mut proposals: Vec<(usize, usize, usize)> = Vec::new();
        for (ri, r) in self.rules.iter().enumerate() {
            for &s in &starts {
                let input = Input::new(text).range(s..).anchored(Anchored::Yes);
                if let Some(m) = r.finder.search(&input) {
                    if m.end() > s {
                        proposals.push((s, m.end(), ri));
                    }
                }
            }
        }
        proposals.sort_by(|a, b| (b.1 - b.0).cmp(&(a.1 - a.0)).then(a.0.cmp(&b.0)).then(a.2.cmp(&b.2)));
        let mut taken: Vec<(usize, usize, usize)> = Vec::new();
        for p in proposals {
            if taken.iter().all(|t| p.1 <= t.0 || p.0 >= t.1) {
                taken.push(p);
            }
        }
        taken.sort();
        let char_of = |byte: usize| text[..byte].chars().count();
        taken
            .into_iter()
            .map(|(s, e, ri)| {
                let r = &self.rules[ri];
                let matched = &text[s..e];
                let mut attributes = BTreeMap::new();
                if let Some(caps) = r.exact.captures(matched) {
                    for (attr, group) in &r.rule.attribute_extractors {
                        if let Some(c) = caps.get(*group) {
                            if !c.as_str().trim().is_empty() {
                                attributes.insert(attr.clone(), Json::String(c.as_str().to_string()));
                            }
                        }
                    }
                }
                AnnotationDraft {
                    tag: r.rule.tag.clone(),
                    span: (char_of(s), char_of(e)),
                    text: matched.to_string(),
                    attributes,
                    rule: ri,
                }
            })
            .collect()
    }

    /// Annotates every section; spans are in full-document offsets.
    pub fn annotate(&self, doc: &Document) -> Vec<AnnotationDraft> {
        doc.sections
            .iter()
            .flat_map(|s| {
                self.annotate_text(&s.content).into_iter().map(move |mut d| {
                    d.span = (d.span.0 + s.char_offset, d.span.1 + s.char_offset);
                    d
                })
            })
            .collect()
    }
}
