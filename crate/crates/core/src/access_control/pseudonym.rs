use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::AccessError;
use crate::metamodel::{fold, Value};

/// Attribute values shorter than this are not considered identifying when
/// checking pseudonyms and scanning for leaks.
pub const PSEUDONYM_MIN_VALUE_LEN: usize = 3;

/// Pseudonyms issued within one query session.
#[derive(Clone, Debug)]
pub struct PseudonymScope {
    scope_key: String,
    by_entity: BTreeMap<String, String>,
    by_pseudonym: BTreeMap<String, String>,
}

impl PseudonymScope {
    pub fn new(scope_key: impl Into<String>) -> Self {
        Self {
            scope_key: scope_key.into(),
            by_entity: BTreeMap::new(),
            by_pseudonym: BTreeMap::new(),
        }
    }

    pub fn scope_key(&self) -> &str {
        &self.scope_key
    }

    /// Stable pseudonym such as `PERS-7f3a09c1` for `entity_key`.
    /// `values` are the entity's attribute strings, none of which may
    /// appear inside the pseudonym.
    pub fn pseudonym(
        &mut self,
        type_name: &str,
        entity_key: &str,
        values: &[String],
    ) -> Result<String, AccessError> {
        if let Some(p) = self.by_entity.get(entity_key) {
            return Ok(p.clone());
        }
        let p = derive(&self.scope_key, type_name, entity_key, values);
        if let Some(other) = self.by_pseudonym.get(&p) {
            return Err(AccessError::PseudonymCollision(other.clone(), entity_key.to_string()));
        }
        self.by_entity.insert(entity_key.to_string(), p.clone());
        self.by_pseudonym.insert(p.clone(), entity_key.to_string());
        Ok(p)
    }
}

fn prefix(type_name: &str) -> String {
    let mut p: String = type_name
        .chars()
        .filter(|c| c.is_ascii_alphabetic())
        .take(4)
        .collect::<String>()
        .to_ascii_uppercase();
    while p.len() < 4 {
        p.push('X');
    }
    p
}

fn derive(scope: &str, type_name: &str, entity_key: &str, values: &[String]) -> String {
    let folded: Vec<String> = values
        .iter()
        .map(|v| fold(v))
        .filter(|v| v.chars().count() >= PSEUDONYM_MIN_VALUE_LEN)
        .collect();
    let head = prefix(type_name);
    for round in 0u32.. {
        let mut h = Sha256::new();
        h.update(scope.as_bytes());
        h.update([0]);
        h.update(type_name.as_bytes());
        h.update([0]);
        h.update(entity_key.as_bytes());
        h.update(round.to_be_bytes());
        let digest = hex::encode(h.finalize());
        let candidate = format!("{head}-{}", &digest[..8]);
        let lower = candidate.to_lowercase();
        if !folded.iter().any(|v| lower.contains(v.as_str())) {
            return candidate;
        }
    }
    unreachable!("the hash space is not exhausted")
}

/// Masked form of an attribute value: text becomes `***`, digits become `#`.
pub fn mask_value(value: &Value) -> serde_json::Value {
    match value {
        Value::Text(_) => "***".into(),
        Value::Integer(_) | Value::Float(_) | Value::Date(_) => value
            .display_strings()
            .concat()
            .chars()
            .map(|c| if c.is_ascii_digit() { '#' } else { c })
            .collect::<String>()
            .into(),
        Value::List(items) => serde_json::Value::Array(items.iter().map(|_| "***".into()).collect()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn format_and_determinism() {
        let mut s = PseudonymScope::new("session-1");
        let p = s.pseudonym("person", "1:22", &["Mario".into()]).unwrap();
        assert!(p.starts_with("PERS-"));
        assert_eq!(p.len(), 13);
        assert_eq!(s.pseudonym("person", "1:22", &[]).unwrap(), p);
        let q = s.pseudonym("person", "1:23", &[]).unwrap();
        assert_ne!(p, q);
        assert_eq!(prefix("law_article"), "LAWA");
        assert_eq!(prefix("x"), "XXXX");
    }

    #[test]
    fn rehashes_when_a_value_appears() {
        let plain = derive("s", "person", "k", &[]);
        let hexpart = plain[5..8].to_string();
        let again = derive("s", "person", "k", &[hexpart.clone()]);
        assert_ne!(plain, again);
        assert!(!again.to_lowercase().contains(&hexpart));
    }

    #[test]
    fn masking_hides_digits() {
        assert_eq!(mask_value(&Value::Integer(1980)), serde_json::json!("####"));
        assert_eq!(
            mask_value(&Value::Date(chrono::NaiveDate::from_ymd_opt(1980, 1, 1).unwrap())),
            serde_json::json!("####-##-##")
        );
    }

    proptest! {
        #[test]
        fn scopes_are_unlinkable(a in "[a-z]{1,12}", b in "[a-z]{1,12}", key in "[0-9]{1,5}") {
            prop_assume!(a != b);
            let pa = PseudonymScope::new(a).pseudonym("person", &key, &[]).unwrap();
            let pb = PseudonymScope::new(b).pseudonym("person", &key, &[]).unwrap();
            prop_assert_ne!(pa, pb);
        }

        #[test]
        fn pseudonym_never_contains_values(values in prop::collection::vec("[0-9a-f]{3,4}", 0..6), key in "[0-9]{1,4}") {
            let p = PseudonymScope::new("s").pseudonym("person", &key, &values).unwrap();
            for v in &values {
                prop_assert!(!p.to_lowercase().contains(v.as_str()));
            }
        }
    }
}
