use std::collections::{BTreeMap, BTreeSet};

/// Lowercased alphanumeric runs with their character spans.
pub fn tokenize(text: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = pos;
            }
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            out.push((std::mem::take(&mut current), (start, pos)));
        }
        pos += 1;
    }
    if !current.is_empty() {
        out.push((current, (start, pos)));
    }
    out
}

/// Term -> document -> occurrence spans.
#[derive(Clone, Debug, Default)]
pub(super) struct InvertedIndex {
    postings: BTreeMap<String, BTreeMap<String, Vec<(usize, usize)>>>,
    doc_terms: BTreeMap<String, BTreeSet<String>>,
}

impl InvertedIndex {
    pub fn add(&mut self, doc_id: &str, text: &str) {
        let terms = self.doc_terms.entry(doc_id.to_string()).or_default();
        for (term, span) in tokenize(text) {
            terms.insert(term.clone());
            self.postings
                .entry(term)
                .or_default()
                .entry(doc_id.to_string())
                .or_default()
                .push(span);
        }
    }

    pub fn remove(&mut self, doc_id: &str) {
        for term in self.doc_terms.remove(doc_id).unwrap_or_default() {
            if let Some(p) = self.postings.get_mut(&term) {
                p.remove(doc_id);
                if p.is_empty() {
                    self.postings.remove(&term);
                }
            }
        }
    }

    pub fn docs_with(&self, term: &str) -> BTreeSet<String> {
        self.postings
            .get(term)
            .map(|p| p.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn occurrences(&self, term: &str, doc_id: &str) -> Vec<(usize, usize)> {
        self.postings
            .get(term)
            .and_then(|p| p.get(doc_id))
            .cloned()
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_are_lowercase_with_char_spans() {
        let toks = tokenize("Art. 642 c.p., Città");
        let terms: Vec<&str> = toks.iter().map(|t| t.0.as_str()).collect();
        assert_eq!(terms, ["art", "642", "c", "p", "città"]);
        assert_eq!(toks[4].1, (15, 20));
    }
}
