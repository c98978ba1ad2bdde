//! The shared metamodel: entity types, identifying keys, relationship
//! definitions, contradiction pairs and derivation/constraint rules.
//!
//! Definitions are append-only. Once a metamodel is distributed to districts
//! it is shared behind an `Arc` and treated as immutable.

pub mod fiscal_code;
mod rules;
mod value;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

pub use rules::{
    AttributeMap, ComparisonOp, ConstraintViolation, DerivedBinding, Rule, RuleOutcome,
    DERIVATION_FUNCTIONS,
};
pub use value::{Value, ValueType};

pub(crate) use value::fold;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetamodelError {
    #[error("entity type `{0}` already defined")]
    DuplicateType(String),
    #[error("entity type `{0}` is not defined")]
    UnknownEntityType(String),
    #[error("attribute `{attribute}` defined twice on `{entity_type}`")]
    DuplicateAttribute { entity_type: String, attribute: String },
    #[error("key of `{entity_type}` references unknown attribute `{attribute}`")]
    UnknownKeyAttribute { entity_type: String, attribute: String },
    #[error("key of `{entity_type}` uses multi-valued attribute `{attribute}`")]
    MultiValuedKeyAttribute { entity_type: String, attribute: String },
    #[error("concrete entity type `{0}` needs at least one key")]
    MissingKey(String),
    #[error("relationship `{0}` already defined")]
    DuplicateRelationship(String),
    #[error("relationship `{0}` is not defined")]
    UnknownRelationship(String),
    #[error("bidirectional or compatible relationship `{0}` cannot contradict itself")]
    SelfContradictionRejected(String),
    #[error("cardinality bound must be at least 1")]
    ZeroCardinality,
    #[error("attribute `{attribute}` is not defined on `{entity_type}`")]
    UnknownAttribute { entity_type: String, attribute: String },
    #[error("value for `{attribute}` does not match its type: {reason}")]
    TypeMismatch { attribute: String, reason: String },
    #[error("invalid rule: {0}")]
    InvalidRule(String),
    #[error("cannot read metamodel: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeDef {
    pub name: String,
    pub value_type: ValueType,
}

impl AttributeDef {
    pub fn new(name: impl Into<String>, value_type: ValueType) -> Self {
        Self {
            name: name.into(),
            value_type,
        }
    }

    pub fn multi_valued(&self) -> bool {
        self.value_type.is_multi_valued()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    pub features: Vec<AttributeDef>,
    /// Each key is a set of feature names that identifies an entity.
    pub keys: Vec<BTreeSet<String>>,
    #[serde(default)]
    pub privacy_level: u8,
    #[serde(default, rename = "abstract")]
    pub is_abstract: bool,
}

impl EntityType {
    pub fn attribute(&self, name: &str) -> Option<&AttributeDef> {
        self.features.iter().find(|a| a.name == name)
    }

    /// Attribute names that take part in at least one key.
    pub fn key_attributes(&self) -> BTreeSet<&str> {
        self.keys
            .iter()
            .flat_map(|k| k.iter().map(String::as_str))
            .collect()
    }

    /// Every key whose attributes are all present in `attributes`.
    pub fn complete_keys<'a, V>(
        &'a self,
        attributes: &'a BTreeMap<String, V>,
    ) -> impl Iterator<Item = (usize, &'a BTreeSet<String>)> + 'a {
        self.keys
            .iter()
            .enumerate()
            .filter(move |(_, key)| key.iter().all(|a| attributes.contains_key(a)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Stored once, readable from both ends.
    Bidirectional,
    /// The reversed pair is forbidden.
    MonoContradictory,
    /// The reversed pair may coexist.
    MonoCompatible,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cardinality {
    Bounded(u32),
    Unbounded,
}

impl Cardinality {
    pub fn allows(self, count: usize) -> bool {
        match self {
            Cardinality::Bounded(n) => count <= n as usize,
            Cardinality::Unbounded => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationshipDef {
    pub name: String,
    pub source_type: String,
    pub target_type: String,
    pub direction: Direction,
    /// How many targets one source may have.
    pub target_cardinality: Cardinality,
    /// How many sources one target may have.
    pub source_cardinality: Cardinality,
    #[serde(default)]
    pub has_validity_period: bool,
}

/// Two relationship types that may not hold over the same pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContradictionPair {
    pub rel_a: String,
    pub rel_b: String,
}

impl ContradictionPair {
    pub const LABEL: &'static str = "CONTR";

    pub fn involves(&self, rel: &str) -> Option<&str> {
        if self.rel_a == rel {
            Some(&self.rel_b)
        } else if self.rel_b == rel {
            Some(&self.rel_a)
        } else {
            None
        }
    }
}

/// On-disk form of `metamodel.json`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetamodelDocument {
    #[serde(default)]
    pub entity_types: Vec<EntityType>,
    #[serde(default)]
    pub relationships: Vec<RelationshipDef>,
    #[serde(default)]
    pub contradictions: Vec<ContradictionPair>,
    #[serde(default)]
    pub rules: Vec<Rule>,
}

#[derive(Clone, Debug, Default)]
pub struct Metamodel {
    types: BTreeMap<String, EntityType>,
    relationships: BTreeMap<String, RelationshipDef>,
    contradictions: Vec<ContradictionPair>,
    rules: Vec<Rule>,
}

impl Metamodel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_document(doc: MetamodelDocument) -> Result<Self, MetamodelError> {
        let mut mm = Metamodel::new();
        for t in doc.entity_types {
            mm.register_type(t)?;
        }
        for r in doc.relationships {
            mm.define_relationship(r)?;
        }
        for c in doc.contradictions {
            mm.declare_contradiction(&c.rel_a, &c.rel_b)?;
        }
        for r in doc.rules {
            mm.add_rule(r)?;
        }
        Ok(mm)
    }

    pub fn from_json(text: &str) -> Result<Self, MetamodelError> {
        let doc: MetamodelDocument =
            serde_json::from_str(text).map_err(|e| MetamodelError::Io(e.to_string()))?;
        Self::from_document(doc)
    }

    pub fn load(path: &Path) -> Result<Self, MetamodelError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetamodelError::Io(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn to_document(&self) -> MetamodelDocument {
        MetamodelDocument {
            entity_types: self.types.values().cloned().collect(),
            relationships: self.relationships.values().cloned().collect(),
            contradictions: self.contradictions.clone(),
            rules: self.rules.clone(),
        }
    }

    pub fn define_entity_type(
        &mut self,
        name: &str,
        features: Vec<AttributeDef>,
        keys: Vec<Vec<&str>>,
    ) -> Result<&EntityType, MetamodelError> {
        let t = EntityType {
            name: name.to_string(),
            features,
            keys: keys
                .into_iter()
                .map(|k| k.into_iter().map(str::to_string).collect())
                .collect(),
            privacy_level: 0,
            is_abstract: false,
        };
        self.register_type(t)
    }

    pub fn register_type(&mut self, t: EntityType) -> Result<&EntityType, MetamodelError> {
        if self.types.contains_key(&t.name) {
            return Err(MetamodelError::DuplicateType(t.name));
        }
        let mut seen = BTreeSet::new();
        for a in &t.features {
            if !seen.insert(a.name.as_str()) {
                return Err(MetamodelError::DuplicateAttribute {
                    entity_type: t.name.clone(),
                    attribute: a.name.clone(),
                });
            }
        }
        for key in &t.keys {
            if key.is_empty() {
                return Err(MetamodelError::MissingKey(t.name.clone()));
            }
            for attr in key {
                match t.attribute(attr) {
                    None => {
                        return Err(MetamodelError::UnknownKeyAttribute {
                            entity_type: t.name.clone(),
                            attribute: attr.clone(),
                        })
                    }
                    Some(def) if def.multi_valued() => {
                        return Err(MetamodelError::MultiValuedKeyAttribute {
                            entity_type: t.name.clone(),
                            attribute: attr.clone(),
                        })
                    }
                    Some(_) => {}
                }
            }
        }
        if t.keys.is_empty() && !t.is_abstract {
            return Err(MetamodelError::MissingKey(t.name));
        }
        let name = t.name.clone();
        Ok(self.types.entry(name).or_insert(t))
    }

    /// Adds features to an existing type. Existing attributes are never
    /// modified or removed.
    pub fn extend_entity_type(
        &mut self,
        name: &str,
        features: Vec<AttributeDef>,
    ) -> Result<&EntityType, MetamodelError> {
        let t = self
            .types
            .get_mut(name)
            .ok_or_else(|| MetamodelError::UnknownEntityType(name.to_string()))?;
        for f in &features {
            if t.attribute(&f.name).is_some() {
                return Err(MetamodelError::DuplicateAttribute {
                    entity_type: name.to_string(),
                    attribute: f.name.clone(),
                });
            }
        }
        t.features.extend(features);
        Ok(t)
    }

    pub fn set_privacy_level(&mut self, name: &str, level: u8) -> Result<(), MetamodelError> {
        let t = self
            .types
            .get_mut(name)
            .ok_or_else(|| MetamodelError::UnknownEntityType(name.to_string()))?;
        t.privacy_level = level;
        Ok(())
    }

    pub fn define_relationship(
        &mut self,
        def: RelationshipDef,
    ) -> Result<&RelationshipDef, MetamodelError> {
        for t in [&def.source_type, &def.target_type] {
            if !self.types.contains_key(t) {
                return Err(MetamodelError::UnknownEntityType(t.clone()));
            }
        }
        if self.relationships.contains_key(&def.name) {
            return Err(MetamodelError::DuplicateRelationship(def.name));
        }
        if matches!(def.target_cardinality, Cardinality::Bounded(0))
            || matches!(def.source_cardinality, Cardinality::Bounded(0))
        {
            return Err(MetamodelError::ZeroCardinality);
        }
        let name = def.name.clone();
        Ok(self.relationships.entry(name).or_insert(def))
    }

    pub fn declare_contradiction(
        &mut self,
        rel_a: &str,
        rel_b: &str,
    ) -> Result<&ContradictionPair, MetamodelError> {
        let a = self
            .relationships
            .get(rel_a)
            .ok_or_else(|| MetamodelError::UnknownRelationship(rel_a.to_string()))?;
        if !self.relationships.contains_key(rel_b) {
            return Err(MetamodelError::UnknownRelationship(rel_b.to_string()));
        }
        if rel_a == rel_b && a.direction != Direction::MonoContradictory {
            return Err(MetamodelError::SelfContradictionRejected(rel_a.to_string()));
        }
        let existing = self.contradictions.iter().position(|c| {
            (c.rel_a == rel_a && c.rel_b == rel_b) || (c.rel_a == rel_b && c.rel_b == rel_a)
        });
        let idx = match existing {
            Some(i) => i,
            None => {
                self.contradictions.push(ContradictionPair {
                    rel_a: rel_a.to_string(),
                    rel_b: rel_b.to_string(),
                });
                self.contradictions.len() - 1
            }
        };
        Ok(&self.contradictions[idx])
    }

    pub fn add_rule(&mut self, rule: Rule) -> Result<(), MetamodelError> {
        rule.check(self)?;
        self.rules.push(rule);
        Ok(())
    }

    pub fn entity_type(&self, name: &str) -> Option<&EntityType> {
        self.types.get(name)
    }

    pub fn require_type(&self, name: &str) -> Result<&EntityType, MetamodelError> {
        self.entity_type(name)
            .ok_or_else(|| MetamodelError::UnknownEntityType(name.to_string()))
    }

    pub fn entity_types(&self) -> impl Iterator<Item = &EntityType> {
        self.types.values()
    }

    pub fn relationship(&self, name: &str) -> Option<&RelationshipDef> {
        self.relationships.get(name)
    }

    pub fn relationships(&self) -> impl Iterator<Item = &RelationshipDef> {
        self.relationships.values()
    }

    pub fn contradictions(&self) -> &[ContradictionPair] {
        &self.contradictions
    }

    /// Relationship names declared contradictory with `rel`.
    pub fn contradicting(&self, rel: &str) -> Vec<&str> {
        self.contradictions
            .iter()
            .filter_map(|c| c.involves(rel))
            .collect()
    }

    pub fn rules_for<'a>(&'a self, entity_type: &'a str) -> impl Iterator<Item = &'a Rule> + 'a {
        self.rules.iter().filter(move |r| r.entity_type() == entity_type)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Validates one raw value against an attribute definition and returns
    /// its canonical form.
    pub fn validate_value(attr: &AttributeDef, raw: &Json) -> Result<Value, MetamodelError> {
        Value::parse(attr.value_type, raw).map_err(|reason| value::mismatch(&attr.name, reason))
    }

    /// Validates a whole raw attribute map for `type_name`.
    pub fn validate_attributes(
        &self,
        type_name: &str,
        raw: &BTreeMap<String, Json>,
    ) -> Result<AttributeMap, MetamodelError> {
        let t = self.require_type(type_name)?;
        let mut out = AttributeMap::new();
        for (name, value) in raw {
            if value.is_null() {
                continue;
            }
            let def = t.attribute(name).ok_or_else(|| MetamodelError::UnknownAttribute {
                entity_type: type_name.to_string(),
                attribute: name.clone(),
            })?;
            let v = Self::validate_value(def, value)?;
            if matches!(&v, Value::List(items) if items.is_empty()) {
                continue;
            }
            out.insert(name.clone(), v);
        }
        Ok(out)
    }

    /// Runs derivation and constraint rules of `type_name` over `attributes`.
    pub fn apply_rules(&self, type_name: &str, attributes: &AttributeMap) -> RuleOutcome {
        rules::apply(self, type_name, attributes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    pub(crate) fn person_features() -> Vec<AttributeDef> {
        use ValueType::*;
        [
            ("name", Text),
            ("surname", Text),
            ("birth_date", Date),
            ("birth_place", Text),
            ("fiscal_code", Text),
            ("father", Text),
            ("mother", Text),
            ("eyes_color", Text),
            ("qualification", ListOfText),
        ]
        .into_iter()
        .map(|(n, t)| AttributeDef::new(n, t))
        .collect()
    }

    fn with_person() -> Metamodel {
        let mut mm = Metamodel::new();
        mm.define_entity_type(
            "person",
            person_features(),
            vec![
                vec!["name", "surname", "birth_date", "birth_place"],
                vec!["fiscal_code"],
            ],
        )
        .unwrap();
        mm
    }

    fn rel(name: &str, direction: Direction, cst: Cardinality, cts: Cardinality, vp: bool) -> RelationshipDef {
        RelationshipDef {
            name: name.into(),
            source_type: "person".into(),
            target_type: "person".into(),
            direction,
            target_cardinality: cst,
            source_cardinality: cts,
            has_validity_period: vp,
        }
    }

    #[test]
    fn person_type_with_two_keys() {
        let mm = with_person();
        let t = mm.entity_type("person").unwrap();
        assert_eq!(t.keys.len(), 2);
        assert!(t.key_attributes().contains("fiscal_code"));
    }

    #[test]
    fn duplicate_type_is_rejected() {
        let mut mm = with_person();
        let err = mm
            .define_entity_type("person", person_features(), vec![vec!["fiscal_code"]])
            .unwrap_err();
        assert_eq!(err, MetamodelError::DuplicateType("person".into()));
    }

    #[test]
    fn abstract_law_article_type() {
        let mut mm = Metamodel::new();
        let t = mm
            .define_entity_type(
                "law_article",
                vec![AttributeDef::new("code", ValueType::Text)],
                vec![vec!["code"]],
            )
            .unwrap();
        assert_eq!(t.keys[0].iter().next().unwrap(), "code");
    }

    #[test]
    fn key_checks() {
        let mut mm = Metamodel::new();
        assert!(matches!(
            mm.define_entity_type("x", vec![AttributeDef::new("a", ValueType::Text)], vec![vec!["b"]]),
            Err(MetamodelError::UnknownKeyAttribute { .. })
        ));
        assert!(matches!(
            mm.define_entity_type(
                "y",
                vec![AttributeDef::new("tags", ValueType::ListOfText)],
                vec![vec!["tags"]]
            ),
            Err(MetamodelError::MultiValuedKeyAttribute { .. })
        ));
        assert!(matches!(
            mm.define_entity_type("z", vec![AttributeDef::new("a", ValueType::Text)], vec![]),
            Err(MetamodelError::MissingKey(_))
        ));
        let concept = EntityType {
            name: "concept".into(),
            features: vec![AttributeDef::new("label", ValueType::Text)],
            keys: vec![],
            privacy_level: 0,
            is_abstract: true,
        };
        assert!(mm.register_type(concept).is_ok());
    }

    #[test]
    fn relationships_and_contradictions() {
        use Cardinality::*;
        let mut mm = with_person();
        mm.define_relationship(rel("FatherOf", Direction::MonoContradictory, Unbounded, Bounded(1), false))
            .unwrap();
        mm.define_relationship(rel("MotherOf", Direction::MonoContradictory, Unbounded, Bounded(1), false))
            .unwrap();
        mm.define_relationship(rel("GrandfatherOf", Direction::MonoContradictory, Unbounded, Bounded(2), false))
            .unwrap();
        mm.define_relationship(rel("FriendOf", Direction::Bidirectional, Unbounded, Unbounded, false))
            .unwrap();
        mm.define_relationship(rel("MarriedWith", Direction::Bidirectional, Bounded(1), Bounded(1), true))
            .unwrap();
        assert!(matches!(
            mm.define_relationship(rel("FriendOf", Direction::Bidirectional, Unbounded, Unbounded, false)),
            Err(MetamodelError::DuplicateRelationship(_))
        ));
        let mut bad = rel("OwnsCar", Direction::MonoCompatible, Unbounded, Unbounded, false);
        bad.target_type = "car".into();
        assert!(matches!(
            mm.define_relationship(bad),
            Err(MetamodelError::UnknownEntityType(_))
        ));

        mm.declare_contradiction("FatherOf", "MotherOf").unwrap();
        mm.declare_contradiction("FatherOf", "GrandfatherOf").unwrap();
        assert_eq!(
            mm.declare_contradiction("FriendOf", "FriendOf").unwrap_err(),
            MetamodelError::SelfContradictionRejected("FriendOf".into())
        );
        assert!(matches!(
            mm.declare_contradiction("FatherOf", "UncleOf"),
            Err(MetamodelError::UnknownRelationship(_))
        ));
        let mut contra = mm.contradicting("FatherOf");
        contra.sort();
        assert_eq!(contra, vec!["GrandfatherOf", "MotherOf"]);
    }

    #[test]
    fn validate_value_examples() {
        let date = AttributeDef::new("birth_date", ValueType::Date);
        assert!(matches!(
            Metamodel::validate_value(&date, &json!("1981-02-29")),
            Err(MetamodelError::TypeMismatch { .. })
        ));
        let eyes = AttributeDef::new("eyes_color", ValueType::Text);
        assert!(Metamodel::validate_value(&eyes, &json!("brown")).is_ok());
        let qual = AttributeDef::new("qualification", ValueType::ListOfText);
        let v = Metamodel::validate_value(&qual, &json!(["engineer", "judge"])).unwrap();
        assert_eq!(v.display_strings().len(), 2);
    }

    #[test]
    fn extension_is_additive_only() {
        let mut mm = with_person();
        mm.extend_entity_type("person", vec![AttributeDef::new("gender", ValueType::Text)])
            .unwrap();
        assert!(mm.entity_type("person").unwrap().attribute("gender").is_some());
        assert!(mm
            .extend_entity_type("person", vec![AttributeDef::new("name", ValueType::Integer)])
            .is_err());
        assert_eq!(
            mm.entity_type("person").unwrap().attribute("name").unwrap().value_type,
            ValueType::Text
        );
    }

    #[test]
    fn json_document_round_trip() {
        let mm = with_person();
        let text = serde_json::to_string(&mm.to_document()).unwrap();
        let back = Metamodel::from_json(&text).unwrap();
        assert_eq!(back.entity_type("person"), mm.entity_type("person"));
    }
}
