use std::collections::BTreeMap;

use chrono::{Months, NaiveDate};
use serde::{Deserialize, Serialize};

use super::fiscal_code;
use super::{Metamodel, MetamodelError, Value, ValueType};

pub type AttributeMap = BTreeMap<String, Value>;

/// Built-in extraction functions usable by derivation rules.
pub const DERIVATION_FUNCTIONS: &[&str] = &["fiscal_code_decode"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedBinding {
    /// Attribute that receives the derived value.
    pub target: String,
    /// Component of the extraction function output.
    pub component: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComparisonOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl ComparisonOp {
    fn holds(self, left: NaiveDate, right: NaiveDate) -> bool {
        match self {
            ComparisonOp::Lt => left < right,
            ComparisonOp::Le => left <= right,
            ComparisonOp::Gt => left > right,
            ComparisonOp::Ge => left >= right,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Rule {
    Derivation {
        entity_type: String,
        source_attribute: String,
        function: String,
        bindings: Vec<DerivedBinding>,
    },
    /// `left op right + offset_years`, checked only when both dates exist.
    Constraint {
        entity_type: String,
        left: String,
        op: ComparisonOp,
        right: String,
        #[serde(default)]
        offset_years: i32,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConstraintViolation {
    /// A derived value disagrees with a present one, or two rules disagree.
    DerivationConflict {
        attribute: String,
        values: Vec<String>,
    },
    InvalidDerivationSource {
        attribute: String,
        reason: String,
    },
    ConstraintFailed {
        left: String,
        op: ComparisonOp,
        right: String,
        offset_years: i32,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RuleOutcome {
    /// Attributes that were absent and are now derived.
    pub derived: AttributeMap,
    pub violations: Vec<ConstraintViolation>,
}

impl RuleOutcome {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn component_type(function: &str, component: &str) -> Option<ValueType> {
    match (function, component) {
        ("fiscal_code_decode", "birth_date") => Some(ValueType::Date),
        ("fiscal_code_decode", "birth_place_code") => Some(ValueType::Text),
        ("fiscal_code_decode", "gender") => Some(ValueType::Text),
        ("fiscal_code_decode", "birth_year") => Some(ValueType::Integer),
        _ => None,
    }
}

impl Rule {
    pub fn entity_type(&self) -> &str {
        match self {
            Rule::Derivation { entity_type, .. } | Rule::Constraint { entity_type, .. } => {
                entity_type
            }
        }
    }

    pub(super) fn check(&self, mm: &Metamodel) -> Result<(), MetamodelError> {
        let t = mm.require_type(self.entity_type())?;
        let attr_type = |name: &str| {
            t.attribute(name)
                .map(|a| a.value_type)
                .ok_or_else(|| MetamodelError::UnknownAttribute {
                    entity_type: t.name.clone(),
                    attribute: name.to_string(),
                })
        };
        match self {
            Rule::Derivation {
                source_attribute,
                function,
                bindings,
                ..
            } => {
                if !DERIVATION_FUNCTIONS.contains(&function.as_str()) {
                    return Err(MetamodelError::InvalidRule(format!(
                        "unknown extraction function `{function}`"
                    )));
                }
                if attr_type(source_attribute)? != ValueType::Text {
                    return Err(MetamodelError::InvalidRule(format!(
                        "`{source_attribute}` must be text"
                    )));
                }
                for b in bindings {
                    let produced = component_type(function, &b.component).ok_or_else(|| {
                        MetamodelError::InvalidRule(format!(
                            "`{function}` has no component `{}`",
                            b.component
                        ))
                    })?;
                    if attr_type(&b.target)? != produced {
                        return Err(MetamodelError::InvalidRule(format!(
                            "`{}` cannot hold a {produced} value",
                            b.target
                        )));
                    }
                }
            }
            Rule::Constraint { left, right, .. } => {
                for a in [left, right] {
                    if attr_type(a)? != ValueType::Date {
                        return Err(MetamodelError::InvalidRule(format!(
                            "constraint operand `{a}` must be a date"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn extract(function: &str, source: &Value) -> Result<BTreeMap<&'static str, Value>, String> {
    match function {
        "fiscal_code_decode" => {
            let text = match source {
                Value::Text(s) => s,
                other => return Err(format!("expected text, got {other}")),
            };
            let decoded = fiscal_code::decode(text).map_err(|e| e.to_string())?;
            let mut out = BTreeMap::new();
            out.insert("birth_date", Value::Date(decoded.birth_date));
            out.insert("birth_place_code", Value::Text(decoded.birth_place_code));
            out.insert("gender", Value::Text(decoded.gender.code().to_string()));
            out.insert(
                "birth_year",
                Value::Integer(chrono::Datelike::year(&decoded.birth_date) as i64),
            );
            Ok(out)
        }
        other => Err(format!("unknown extraction function `{other}`")),
    }
}

fn add_years(date: NaiveDate, years: i32) -> Option<NaiveDate> {
    let months = Months::new(years.unsigned_abs() * 12);
    if years >= 0 {
        date.checked_add_months(months)
    } else {
        date.checked_sub_months(months)
    }
}

pub(super) fn apply(mm: &Metamodel, type_name: &str, attributes: &AttributeMap) -> RuleOutcome {
    let mut violations = Vec::new();
    // Every proposal per target, so the result does not depend on rule order.
    let mut proposals: BTreeMap<String, Vec<Value>> = BTreeMap::new();

    for rule in mm.rules_for(type_name) {
        let Rule::Derivation {
            source_attribute,
            function,
            bindings,
            ..
        } = rule
        else {
            continue;
        };
        let Some(source) = attributes.get(source_attribute) else {
            continue;
        };
        match extract(function, source) {
            Ok(components) => {
                for b in bindings {
                    if let Some(v) = components.get(b.component.as_str()) {
                        proposals.entry(b.target.clone()).or_default().push(v.clone());
                    }
                }
            }
            Err(reason) => violations.push(ConstraintViolation::InvalidDerivationSource {
                attribute: source_attribute.clone(),
                reason,
            }),
        }
    }

    let mut derived = AttributeMap::new();
    for (target, values) in proposals {
        let mut all: Vec<&Value> = values.iter().collect();
        if let Some(present) = attributes.get(&target) {
            all.insert(0, present);
        }
        let consistent = all.iter().all(|v| v.same_as(all[0]));
        if !consistent {
            let mut rendered: Vec<String> = all.iter().map(|v| v.to_string()).collect();
            rendered.sort();
            rendered.dedup();
            violations.push(ConstraintViolation::DerivationConflict {
                attribute: target,
                values: rendered,
            });
        } else if !attributes.contains_key(&target) {
            derived.insert(target, values[0].clone());
        }
    }

    let lookup = |name: &str| attributes.get(name).or_else(|| derived.get(name));
    for rule in mm.rules_for(type_name) {
        let Rule::Constraint {
            left,
            op,
            right,
            offset_years,
            ..
        } = rule
        else {
            continue;
        };
        let (Some(l), Some(r)) = (
            lookup(left).and_then(Value::as_date),
            lookup(right).and_then(Value::as_date),
        ) else {
            continue;
        };
        let holds = add_years(r, *offset_years).is_some_and(|bound| op.holds(l, bound));
        if !holds {
            violations.push(ConstraintViolation::ConstraintFailed {
                left: left.clone(),
                op: *op,
                right: right.clone(),
                offset_years: *offset_years,
            });
        }
    }

    violations.sort();
    violations.dedup();
    RuleOutcome {
        derived,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metamodel::AttributeDef;

    fn metamodel(rules: Vec<Rule>) -> Metamodel {
        use ValueType::*;
        let mut mm = Metamodel::new();
        mm.define_entity_type(
            "person",
            [
                ("name", Text),
                ("fiscal_code", Text),
                ("birth_date", Date),
                ("birth_place_code", Text),
                ("gender", Text),
                ("phd_date", Date),
            ]
            .into_iter()
            .map(|(n, t)| AttributeDef::new(n, t))
            .collect(),
            vec![vec!["fiscal_code"]],
        )
        .unwrap();
        for r in rules {
            mm.add_rule(r).unwrap();
        }
        mm
    }

    fn fiscal_rule() -> Rule {
        Rule::Derivation {
            entity_type: "person".into(),
            source_attribute: "fiscal_code".into(),
            function: "fiscal_code_decode".into(),
            bindings: vec![
                DerivedBinding {
                    target: "birth_date".into(),
                    component: "birth_date".into(),
                },
                DerivedBinding {
                    target: "birth_place_code".into(),
                    component: "birth_place_code".into(),
                },
            ],
        }
    }

    fn phd_rule() -> Rule {
        Rule::Constraint {
            entity_type: "person".into(),
            left: "phd_date".into(),
            op: ComparisonOp::Ge,
            right: "birth_date".into(),
            offset_years: 20,
        }
    }

    fn date(s: &str) -> Value {
        Value::Date(NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap())
    }

    #[test]
    fn fiscal_code_derivation() {
        let mm = metamodel(vec![fiscal_rule()]);
        let mut attrs = AttributeMap::new();
        attrs.insert("fiscal_code".into(), Value::Text("RSSMRA80A01H501U".into()));
        let out = mm.apply_rules("person", &attrs);
        assert!(out.is_clean());
        assert_eq!(out.derived["birth_date"], date("1980-01-01"));
        assert_eq!(out.derived["birth_place_code"], Value::Text("H501".into()));
    }

    #[test]
    fn derivation_never_overwrites() {
        let mm = metamodel(vec![fiscal_rule()]);
        let mut attrs = AttributeMap::new();
        attrs.insert("fiscal_code".into(), Value::Text("RSSMRA80A01H501U".into()));
        attrs.insert("birth_date".into(), date("1981-01-01"));
        let out = mm.apply_rules("person", &attrs);
        assert!(!out.derived.contains_key("birth_date"));
        assert!(matches!(
            &out.violations[0],
            ConstraintViolation::DerivationConflict { attribute, .. } if attribute == "birth_date"
        ));
    }

    #[test]
    fn phd_constraint() {
        let mm = metamodel(vec![phd_rule()]);
        let mut attrs = AttributeMap::new();
        attrs.insert("phd_date".into(), date("1999-01-01"));
        attrs.insert("birth_date".into(), date("1980-01-01"));
        let out = mm.apply_rules("person", &attrs);
        assert_eq!(out.violations.len(), 1);
        attrs.insert("phd_date".into(), date("2000-01-01"));
        assert!(mm.apply_rules("person", &attrs).is_clean());
        attrs.remove("birth_date");
        assert!(mm.apply_rules("person", &attrs).is_clean());
    }

    #[test]
    fn empty_map_is_vacuous() {
        let mm = metamodel(vec![fiscal_rule(), phd_rule()]);
        assert_eq!(mm.apply_rules("person", &AttributeMap::new()), RuleOutcome::default());
    }

    #[test]
    fn constraint_can_use_derived_dates() {
        let mm = metamodel(vec![phd_rule(), fiscal_rule()]);
        let mut attrs = AttributeMap::new();
        attrs.insert("fiscal_code".into(), Value::Text("RSSMRA80A01H501U".into()));
        attrs.insert("phd_date".into(), date("1995-06-01"));
        let out = mm.apply_rules("person", &attrs);
        assert_eq!(out.violations.len(), 1);
    }

    #[test]
    fn invalid_source_is_a_violation() {
        let mm = metamodel(vec![fiscal_rule()]);
        let mut attrs = AttributeMap::new();
        attrs.insert("fiscal_code".into(), Value::Text("RSSMRA80A01H501X".into()));
        let out = mm.apply_rules("person", &attrs);
        assert!(out.derived.is_empty());
        assert!(matches!(
            out.violations[0],
            ConstraintViolation::InvalidDerivationSource { .. }
        ));
    }

    #[test]
    fn rule_checks() {
        let mut mm = metamodel(vec![]);
        let bad = Rule::Derivation {
            entity_type: "person".into(),
            source_attribute: "fiscal_code".into(),
            function: "eval".into(),
            bindings: vec![],
        };
        assert!(matches!(mm.add_rule(bad), Err(MetamodelError::InvalidRule(_))));
        let bad = Rule::Constraint {
            entity_type: "person".into(),
            left: "name".into(),
            op: ComparisonOp::Ge,
            right: "birth_date".into(),
            offset_years: 0,
        };
        assert!(mm.add_rule(bad).is_err());
    }
}
