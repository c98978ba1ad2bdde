//! Bundled demo configuration used by tests, scenarios and `ereg init`.

use std::sync::Arc;

use serde_json::json;

use crate::access_control::{default_rules, Ownership, OwnershipEntry, PermissionTables, PrivacyConfig};
use crate::district::District;
use crate::ids::{Iid, LocalId};
use crate::ingestion::{run_pipeline, IngestDocument, PipelineOptions};
use crate::metamodel::Metamodel;

pub const METAMODEL_JSON: &str = include_str!("../fixtures/metamodel.json");

pub fn metamodel() -> Metamodel {
    Metamodel::from_json(METAMODEL_JSON).expect("bundled metamodel is valid")
}

/// Users of the permission fixture, one per ownership level.
pub const MATRIX_USERS: [(&str, Ownership); 4] = [
    ("olga", Ownership::Owner),
    ("edo", Ownership::Editor),
    ("rita", Ownership::Reader),
    ("gino", Ownership::Generic),
];

/// Tables with the default privacy-permission rules.
pub fn default_tables(ownership: &[(Iid, &str, &str, Ownership)]) -> PermissionTables {
    PermissionTables {
        privacy: vec![],
        ownership: ownership
            .iter()
            .map(|(iid, user, doc, level)| OwnershipEntry {
                instance_id: *iid,
                user: user.to_string(),
                doc_id: doc.to_string(),
                level: *level,
            })
            .collect(),
        rules: default_rules(PrivacyConfig::default()),
    }
}

/// Char span of `needle` in `text`.
pub fn span_of(text: &str, needle: &str) -> (usize, usize) {
    let b = text.find(needle).expect("needle occurs in text");
    let start = text[..b].chars().count();
    (start, start + needle.chars().count())
}

/// One document mentioning an entity of every privacy level 0..=3, owned
/// at each ownership level by one of [`MATRIX_USERS`]. Returns the district
/// and the entity of each level, indexed by level.
pub fn permission_fixture(iid: Iid) -> (District, [LocalId; 4]) {
    let ownership: Vec<(Iid, &str, &str, Ownership)> =
        MATRIX_USERS.iter().map(|(u, o)| (iid, *u, "p1", *o)).collect();
    let mut d = District::new(iid, Arc::new(metamodel()), &default_tables(&ownership));
    let text = "The court applied art. 642 c.p. against ACME Srl. Witness Mario Rossi was heard. The minor Anna Bianchi was present.";
    let ann = |needle: &str, entity: serde_json::Value| {
        let (start, end) = span_of(text, needle);
        json!({"tag": entity["type"], "start": start, "end": end, "entity": entity})
    };
    let doc: IngestDocument = serde_json::from_value(json!({
        "doc_id": "p1",
        "metadata": {"kind": "fraud"},
        "sections": [{"name": "Body", "content": text}],
        "annotations": [
            ann("art. 642 c.p.", json!({"type": "law_article", "attributes": {"code": "642"}})),
            ann("ACME Srl", json!({"type": "organization", "attributes": {"name": "ACME Srl", "vat_number": "IT01234567890", "city": "Milano"}})),
            ann("Mario Rossi", json!({"type": "person", "attributes": {"name": "Mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma", "gender": "M"}})),
            ann("Anna Bianchi", json!({"type": "minor", "attributes": {"name": "Anna", "surname": "Bianchi", "birth_date": "2012-05-05"}})),
        ],
    }))
    .expect("fixture document is well formed");
    let report = run_pipeline(&mut d, &doc, None, PipelineOptions::default()).expect("fixture ingests");
    let ids: Vec<LocalId> = report.annotations.iter().map(|a| a.entity_ref.expect("bound")).collect();
    (d, [ids[0], ids[1], ids[2], ids[3]])
}

#[cfg(test)]
mod tests {
    #[test]
    fn bundled_metamodel_loads() {
        let mm = super::metamodel();
        assert_eq!(mm.entity_type("person").unwrap().keys.len(), 3);
        assert!(mm.relationship("MarriedWith").unwrap().has_validity_period);
    }

    #[test]
    fn permission_fixture_covers_every_level() {
        let (d, ids) = super::permission_fixture(crate::ids::Iid(1));
        for (pl, id) in ids.iter().enumerate() {
            let t = &d.entity(*id).unwrap().type_name;
            assert_eq!(d.access().privacy_level(t) as usize, pl);
        }
    }
}
