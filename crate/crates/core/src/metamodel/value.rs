//! Attribute values and their canonical forms.

use std::cmp::Ordering;
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value as Json;

use super::MetamodelError;

const FLOAT_RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueType {
    Text,
    Integer,
    Float,
    Date,
    #[serde(alias = "list")]
    ListOfText,
}

impl ValueType {
    pub fn is_multi_valued(self) -> bool {
        matches!(self, ValueType::ListOfText)
    }
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ValueType::Text => "text",
            ValueType::Integer => "integer",
            ValueType::Float => "float",
            ValueType::Date => "date",
            ValueType::ListOfText => "list",
        };
        f.write_str(name)
    }
}

/// A validated, canonicalized attribute value.
///
/// Text is trimmed but keeps its case; comparisons ignore case. Lists are
/// sorted by their case-folded form and deduplicated so that unions do not
/// depend on arrival order.
#[derive(Clone, Debug)]
pub enum Value {
    Text(String),
    Integer(i64),
    Float(f64),
    Date(NaiveDate),
    List(Vec<String>),
}

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Text(_) => ValueType::Text,
            Value::Integer(_) => ValueType::Integer,
            Value::Float(_) => ValueType::Float,
            Value::Date(_) => ValueType::Date,
            Value::List(_) => ValueType::ListOfText,
        }
    }

    /// Parses raw JSON into the canonical form required by `value_type`.
    pub fn parse(value_type: ValueType, raw: &Json) -> Result<Value, String> {
        match value_type {
            ValueType::Text => match raw {
                Json::String(s) => Ok(Value::Text(s.trim().to_string())),
                other => Err(format!("expected text, got {other}")),
            },
            ValueType::Integer => match raw {
                Json::Number(n) => n
                    .as_i64()
                    .map(Value::Integer)
                    .ok_or_else(|| format!("expected integer, got {n}")),
                Json::String(s) => s
                    .trim()
                    .parse::<i64>()
                    .map(Value::Integer)
                    .map_err(|_| format!("expected integer, got {s:?}")),
                other => Err(format!("expected integer, got {other}")),
            },
            ValueType::Float => match raw {
                Json::Number(n) => n
                    .as_f64()
                    .filter(|f| f.is_finite())
                    .map(Value::Float)
                    .ok_or_else(|| format!("expected float, got {n}")),
                Json::String(s) => s
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|f| f.is_finite())
                    .map(Value::Float)
                    .ok_or_else(|| format!("expected float, got {s:?}")),
                other => Err(format!("expected float, got {other}")),
            },
            ValueType::Date => match raw {
                Json::String(s) => NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
                    .map(Value::Date)
                    .map_err(|_| format!("expected ISO-8601 calendar date, got {s:?}")),
                other => Err(format!("expected date, got {other}")),
            },
            ValueType::ListOfText => {
                let items = match raw {
                    Json::String(s) => vec![s.clone()],
                    Json::Array(items) => items
                        .iter()
                        .map(|item| match item {
                            Json::String(s) => Ok(s.clone()),
                            other => Err(format!("list elements must be text, got {other}")),
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                    other => return Err(format!("expected list of text, got {other}")),
                };
                Ok(Value::List(canonical_list(items)))
            }
        }
    }

    /// Case-insensitive, tolerance-aware equality.
    pub fn same_as(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Text(a), Value::Text(b)) => fold(a) == fold(b),
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Float(a), Value::Float(b)) => floats_equal(*a, *b),
            (Value::Date(a), Value::Date(b)) => a == b,
            (Value::List(a), Value::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| fold(x) == fold(y))
            }
            _ => false,
        }
    }

    /// Key used by equality indexes. Equal keys imply `same_as` for every
    /// kind except floats, which callers must re-check.
    pub fn index_key(&self) -> String {
        match self {
            Value::Text(s) => fold(s),
            Value::Integer(i) => i.to_string(),
            Value::Float(f) => format!("{f:.6e}"),
            Value::Date(d) => d.format("%Y-%m-%d").to_string(),
            Value::List(items) => items.iter().map(|s| fold(s)).collect::<Vec<_>>().join("\u{1f}"),
        }
    }

    /// Canonical text rendering, used by leak scanners and masking.
    pub fn display_strings(&self) -> Vec<String> {
        match self {
            Value::Text(s) => vec![s.clone()],
            Value::Integer(i) => vec![i.to_string()],
            Value::Float(f) => vec![f.to_string()],
            Value::Date(d) => vec![d.format("%Y-%m-%d").to_string()],
            Value::List(items) => items.clone(),
        }
    }

    /// Union for multi-valued attributes; for single values the receiver wins.
    pub fn union(&self, other: &Value) -> Value {
        match (self, other) {
            (Value::List(a), Value::List(b)) => {
                Value::List(canonical_list(a.iter().chain(b).cloned().collect()))
            }
            _ => self.clone(),
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Value::Text(s) => Json::String(s.clone()),
            Value::Integer(i) => Json::from(*i),
            Value::Float(f) => Json::from(*f),
            Value::Date(d) => Json::String(d.format("%Y-%m-%d").to_string()),
            Value::List(items) => Json::Array(items.iter().cloned().map(Json::String).collect()),
        }
    }

    pub fn as_date(&self) -> Option<NaiveDate> {
        match self {
            Value::Date(d) => Some(*d),
            _ => None,
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.same_as(other)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::List(items) => write!(f, "[{}]", items.join(", ")),
            other => f.write_str(&other.display_strings().join("")),
        }
    }
}

pub(crate) fn fold(s: &str) -> String {
    s.trim().to_lowercase()
}

fn floats_equal(a: f64, b: f64) -> bool {
    if a == b {
        return true;
    }
    let scale = a.abs().max(b.abs());
    (a - b).abs() <= FLOAT_RELATIVE_TOLERANCE * scale
}

fn canonical_list(items: Vec<String>) -> Vec<String> {
    let mut items: Vec<String> = items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    items.sort_by(|a, b| match fold(a).cmp(&fold(b)) {
        Ordering::Equal => a.cmp(b),
        other => other,
    });
    items.dedup_by(|a, b| fold(a) == fold(b));
    items
}

pub(crate) fn mismatch(attribute: &str, reason: String) -> MetamodelError {
    MetamodelError::TypeMismatch {
        attribute: attribute.to_string(),
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dates_must_exist() {
        assert!(Value::parse(ValueType::Date, &json!("1981-02-29")).is_err());
        assert!(Value::parse(ValueType::Date, &json!("1980-02-29")).is_ok());
        assert!(Value::parse(ValueType::Date, &json!("29/02/1980")).is_err());
    }

    #[test]
    fn text_is_trimmed_and_compared_case_insensitively() {
        let a = Value::parse(ValueType::Text, &json!("  Rossi ")).unwrap();
        let b = Value::parse(ValueType::Text, &json!("ROSSI")).unwrap();
        assert_eq!(a.display_strings(), vec!["Rossi".to_string()]);
        assert!(a.same_as(&b));
        assert_eq!(a.index_key(), b.index_key());
    }

    #[test]
    fn lists_are_order_free() {
        let a = Value::parse(ValueType::ListOfText, &json!(["judge", "Engineer"])).unwrap();
        let b = Value::parse(ValueType::ListOfText, &json!(["engineer", "judge", "JUDGE"])).unwrap();
        assert!(a.same_as(&b));
        let single = Value::parse(ValueType::ListOfText, &json!("judge")).unwrap();
        assert!(matches!(single, Value::List(ref v) if v.len() == 1));
    }

    #[test]
    fn floats_use_relative_tolerance() {
        assert!(Value::Float(1.0).same_as(&Value::Float(1.0 + 1e-12)));
        assert!(!Value::Float(1.0).same_as(&Value::Float(1.0001)));
    }

    #[test]
    fn type_mismatches_are_reported() {
        assert!(Value::parse(ValueType::Text, &json!(3)).is_err());
        assert!(Value::parse(ValueType::Integer, &json!("x")).is_err());
        assert!(Value::parse(ValueType::ListOfText, &json!([1, 2])).is_err());
        assert_eq!(
            Value::parse(ValueType::Integer, &json!(" 42 ")).unwrap().index_key(),
            "42"
        );
    }
}
