use super::*;
use crate::corpus::{ChunkStrategy, Corpus, SectionInput};
use crate::demo;
use crate::metamodel::{AttributeMap, Value};
use proptest::prelude::*;

fn tables(entries: &[(&str, &str, Ownership)]) -> PermissionTables {
    PermissionTables {
        privacy: vec![],
        ownership: entries
            .iter()
            .map(|(u, d, o)| OwnershipEntry {
                instance_id: Iid(1),
                user: u.to_string(),
                doc_id: d.to_string(),
                level: *o,
            })
            .collect(),
        rules: default_rules(PrivacyConfig::default()),
    }
}

fn ac(entries: &[(&str, &str, Ownership)]) -> AccessControl {
    AccessControl::new(Iid(1), &tables(entries), &demo::metamodel())
}

#[test]
fn default_table_cells() {
    use Ownership::*;
    use Permission::*;
    let expected = [
        (Owner, [FullControl, FullControl, FullControl, FullControl]),
        (Editor, [ReadOnly, ReadOnly, ReadOnly, ReadAnonymized]),
        (Reader, [ReadOnly, ReadOnly, ReadAnonymized, ReadAnonymized]),
        (Generic, [ReadOnly, WithoutMentions, CountOnly, Denied]),
    ];
    let a = ac(&[]);
    for (o, row) in expected {
        for (pl, p) in row.iter().enumerate() {
            assert_eq!(a.rule(o, pl as u8), *p, "{o:?} x {pl}");
        }
    }
    assert_eq!(a.rule(Owner, 9), Denied);
}

#[test]
fn resolve_uses_ownership_and_type_privacy() {
    let a = ac(&[("ann", "d1", Ownership::Reader), ("bob", "d1", Ownership::Owner)]);
    assert_eq!(a.resolve_permission("bob", "d1", "minor"), Permission::FullControl);
    assert_eq!(a.resolve_permission("ann", "d1", "organization"), Permission::ReadOnly);
    assert_eq!(a.resolve_permission("ann", "d1", "person"), Permission::ReadAnonymized);
    assert_eq!(a.resolve_permission("ann", "d2", "law_article"), Permission::Denied);
    assert_eq!(a.resolve_permission("nobody", "d1", "law_article"), Permission::Denied);
}

#[test]
fn privacy_table_overrides_metamodel() {
    let mut t = tables(&[("ann", "d1", Ownership::Generic)]);
    t.privacy.push(EntityTypePrivacy {
        type_name: "person".into(),
        privacy_level: 0,
    });
    let a = AccessControl::new(Iid(1), &t, &demo::metamodel());
    assert_eq!(a.resolve_permission("ann", "d1", "person"), Permission::ReadOnly);
    let round = serde_json::to_string(&a.tables()).unwrap();
    assert_eq!(PermissionTables::from_json(&round).unwrap().privacy.len(), 4);
}

fn mario_view() -> ViewRequest {
    let mut attributes = AttributeMap::new();
    attributes.insert("name".into(), Value::Text("Mario".into()));
    attributes.insert("surname".into(), Value::Text("Rossi".into()));
    attributes.insert("father".into(), Value::Text("Giuseppe".into()));
    attributes.insert("birth_year".into(), Value::Integer(1980));
    ViewRequest {
        entity: Some(EntityView {
            key: "1:22".into(),
            type_name: "person".into(),
            privacy_level: 2,
            attributes,
            relationships: vec![RelationshipView {
                rel_name: "FatherOf".into(),
                outgoing: false,
                other_key: "1:7".into(),
                other_type: "person".into(),
                other_label: "Giuseppe Rossi".into(),
                other_public: false,
                other_values: vec!["Giuseppe".into(), "Rossi".into()],
            }],
        }),
        mentions: vec![MentionView {
            doc_id: "d1".into(),
            ann_id: "a1".into(),
            span: (4, 15),
            text: "Mario Rossi".into(),
        }],
        documents: vec![DocumentView {
            doc_id: "d1".into(),
            text: "Sig Mario Rossi, figlio di Giuseppe, nato nel 1980.".into(),
            redactions: vec![((4, 15), "X".into())],
            sensitive_values: vec![],
        }],
    }
}

#[test]
fn five_outcomes() {
    let req = mario_view();
    let mut scope = PseudonymScope::new("s");
    let full = apply_visibility(&req, Permission::FullControl, &mut scope).unwrap();
    assert!(!full.read_only);
    assert_eq!(full.display_name.as_deref(), Some("Mario Rossi"));
    let ro = apply_visibility(&req, Permission::ReadOnly, &mut scope).unwrap();
    assert!(ro.read_only);

    let anon = apply_visibility(&req, Permission::ReadAnonymized, &mut scope).unwrap();
    let text = serde_json::to_string(&anon).unwrap();
    let values = req.entity.as_ref().unwrap().values();
    assert!(scan_leaks(&text, &values).is_empty(), "{text}");
    assert!(anon.display_name.as_ref().unwrap().starts_with("PERS-"));
    assert_eq!(anon.mentions.as_ref().unwrap()[0].span, (4, 15));
    assert_eq!(anon.attributes.as_ref().unwrap()["birth_year"], serde_json::json!("####"));

    let wm = apply_visibility(&req, Permission::WithoutMentions, &mut scope).unwrap();
    assert_eq!(wm.attributes.as_ref().unwrap()["father"], serde_json::json!("Giuseppe"));
    assert!(wm.documents.is_none() && wm.mentions.is_none());
    let wm_text = serde_json::to_string(&wm).unwrap();
    assert!(!wm_text.contains("nato nel"));

    let co = apply_visibility(&req, Permission::CountOnly, &mut scope).unwrap();
    assert_eq!(co.counts, Counts { mentions: 1, documents: 1 });
    assert!(scan_leaks(&serde_json::to_string(&co).unwrap(), &values).is_empty());

    assert_eq!(
        apply_visibility(&req, Permission::Denied, &mut scope),
        Err(AccessError::PermissionDenied)
    );
}

#[test]
fn rendered_fields_shrink_with_permission() {
    let req = mario_view();
    let mut scope = PseudonymScope::new("s");
    let levels: Vec<Permission> = Permission::ALL.iter().copied().filter(|p| *p != Permission::Denied).collect();
    for w in levels.windows(2) {
        let lower = apply_visibility(&req, w[0], &mut scope).unwrap().present_fields();
        let higher = apply_visibility(&req, w[1], &mut scope).unwrap().present_fields();
        assert!(lower.iter().all(|f| higher.contains(f)), "{:?} vs {:?}", w[0], w[1]);
    }
}

#[test]
fn documents_render_per_section() {
    let mut corpus = Corpus::new(Iid(1));
    let doc = corpus
        .ingest_document(
            "d1",
            &[],
            &[
                SectionInput { name: "Intro".into(), content: "Udienza del tribunale. ".into() },
                SectionInput { name: "Parties".into(), content: "Ricorrente Mario Rossi. ".into() },
                SectionInput { name: "Law".into(), content: "Visto l'art. 642 c.p.".into() },
            ],
            ChunkStrategy::Paragraph,
        )
        .unwrap()
        .clone();
    let offset = doc.sections[1].char_offset;
    let law = doc.sections[2].char_offset;
    let anns = vec![
        AnnotationContext {
            span: (offset + 11, offset + 22),
            type_name: "person".into(),
            privacy_level: 2,
            entity_key: Some("1:1".into()),
            values: vec!["Mario".into(), "Rossi".into()],
        },
        AnnotationContext {
            span: (law + 13, law + 21),
            type_name: "law_article".into(),
            privacy_level: 0,
            entity_key: Some("1:2".into()),
            values: vec!["642 c.p.".into()],
        },
    ];
    let a = ac(&[
        ("gen", "d1", Ownership::Generic),
        ("reader", "d1", Ownership::Reader),
        ("owner", "d1", Ownership::Owner),
    ]);
    let mut scope = PseudonymScope::new("s");

    let g = render_document(&a, "gen", &doc, &anns, &mut scope).unwrap();
    assert!(g.sections[0].text.is_some());
    assert!(g.sections[1].text.is_none());
    assert_eq!(g.sections[2].text.as_deref(), Some("Visto l'art. 642 c.p."));
    assert_eq!(g.entity_counts["person"], 1);

    let r = render_document(&a, "reader", &doc, &anns, &mut scope).unwrap();
    let parties = r.sections[1].text.as_ref().unwrap();
    assert!(r.sections[1].anonymized);
    assert!(parties.starts_with("Ricorrente PERS-"));
    assert!(scan_leaks(parties, &anns[0].values).is_empty());

    let o = render_document(&a, "owner", &doc, &anns, &mut scope).unwrap();
    assert_eq!(o.sections[1].text.as_deref(), Some("Ricorrente Mario Rossi. "));
    assert!(matches!(
        render_document(&a, "stranger", &doc, &anns, &mut scope),
        Err(AccessError::PermissionDenied)
    ));
}

proptest! {
    #[test]
    fn anonymized_rendering_never_leaks(
        name in "Q[a-z]{4,9}",
        surname in "Q[a-z]{4,9}",
        year in 1900i64..2020,
        filler in "[a-z ]{0,30}",
    ) {
        let mut req = mario_view();
        let e = req.entity.as_mut().unwrap();
        e.attributes.insert("name".into(), Value::Text(name.clone()));
        e.attributes.insert("surname".into(), Value::Text(surname.clone()));
        e.attributes.insert("birth_year".into(), Value::Integer(year));
        let text = format!("{filler} {name} {surname} {filler} {}", name.to_uppercase());
        req.documents[0].text = text;
        req.documents[0].redactions.clear();
        req.mentions[0].text = format!("{name} {surname}");
        let values = req.entity.as_ref().unwrap().values();
        let mut scope = PseudonymScope::new("q");
        for p in [Permission::ReadAnonymized, Permission::CountOnly] {
            let out = serde_json::to_string(&apply_visibility(&req, p, &mut scope).unwrap()).unwrap();
            prop_assert!(scan_leaks(&out, &values).is_empty(), "{out}");
        }
    }
}
