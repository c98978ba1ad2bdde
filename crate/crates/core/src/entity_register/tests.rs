use super::*;
use crate::demo;
use chrono::NaiveDate;
use proptest::prelude::*;
use serde_json::json;

fn register() -> EntityRegister {
    EntityRegister::new(Iid(1), Arc::new(demo::metamodel()))
}

fn mention(type_name: &str, attrs: Json) -> MentionInput {
    MentionInput {
        type_name: type_name.into(),
        attributes: serde_json::from_value(attrs).unwrap(),
        relationships: vec![],
        mention: None,
    }
}

fn with_doc(mut m: MentionInput, doc: &str, ann: &str) -> MentionInput {
    m.mention = Some(Mention {
        doc_id: doc.into(),
        ann_id: ann.into(),
    });
    m
}

fn mario() -> MentionInput {
    mention(
        "person",
        json!({"name": "Mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma"}),
    )
}

fn person(reg: &mut EntityRegister, name: &str) -> LocalId {
    let m = mention(
        "person",
        json!({"name": name, "surname": "Neri", "birth_date": "1970-01-01", "birth_place": "Roma"}),
    );
    reg.upsert_from_mention(&m).unwrap().local_id().unwrap()
}

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
}

#[test]
fn full_key_creates_then_enlarges_then_conflicts() {
    let mut reg = register();
    let created = reg.upsert_from_mention(&mario()).unwrap();
    let id = created.local_id().unwrap();
    assert_eq!(created, UpsertOutcome::Created { local_id: id });

    let mut more = mario();
    more.attributes.insert("eyes_color".into(), json!("brown"));
    match reg.upsert_from_mention(&more).unwrap() {
        UpsertOutcome::Enlarged {
            local_id,
            added_attributes,
            ..
        } => {
            assert_eq!(local_id, id);
            assert_eq!(added_attributes, vec!["eyes_color".to_string()]);
        }
        other => panic!("{other:?}"),
    }

    let mut clash = mario();
    clash.attributes.insert("eyes_color".into(), json!("green"));
    match reg.upsert_from_mention(&clash).unwrap() {
        UpsertOutcome::Conflict { report } => {
            assert_eq!(report.target, Some(id));
            assert_eq!(report.clashes[0].attribute, "eyes_color");
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(reg.len(), 1);
    assert_eq!(reg.events().len(), 2);
}

#[test]
fn identical_mention_matches_without_event() {
    let mut reg = register();
    reg.upsert_from_mention(&mario()).unwrap();
    let again = reg.upsert_from_mention(&mario()).unwrap();
    assert!(matches!(again, UpsertOutcome::Matched { .. }));
    assert_eq!(reg.events().len(), 1);
}

#[test]
fn text_comparison_ignores_case_and_whitespace() {
    let mut reg = register();
    reg.upsert_from_mention(&mario()).unwrap();
    let m = mention(
        "person",
        json!({"name": " MARIO ", "surname": "rossi", "birth_date": "1980-01-01", "birth_place": "roma"}),
    );
    assert!(matches!(reg.upsert_from_mention(&m).unwrap(), UpsertOutcome::Matched { .. }));
}

#[test]
fn fiscal_code_derivations_are_stored() {
    let mut reg = register();
    let m = mention("person", json!({"fiscal_code": "RSSMRA80A01H501U"}));
    let id = reg.upsert_from_mention(&m).unwrap().local_id().unwrap();
    let e = reg.get(id).unwrap();
    assert_eq!(e.attributes["birth_date"].to_json(), json!("1980-01-01"));
    assert_eq!(e.attributes["birth_place_code"].to_json(), json!("H501"));
    assert_eq!(e.attributes["gender"].to_json(), json!("M"));
}

#[test]
fn rule_violation_is_a_conflict_and_stores_nothing() {
    let mut reg = register();
    let mut m = mario();
    m.attributes.insert("phd_date".into(), json!("1999-01-01"));
    assert!(matches!(reg.upsert_from_mention(&m).unwrap(), UpsertOutcome::Conflict { .. }));
    assert!(reg.is_empty());
}

#[test]
fn unknown_type_and_bad_values_are_errors() {
    let mut reg = register();
    assert!(matches!(
        reg.upsert_from_mention(&mention("planet", json!({}))),
        Err(RegisterError::UnknownType(_))
    ));
    assert!(matches!(
        reg.upsert_from_mention(&mention("person", json!({"birth_date": "1981-02-29"}))),
        Err(RegisterError::Validation(_))
    ));
}

#[test]
fn lookup_requires_exactly_one_key() {
    let mut reg = register();
    let id = reg.upsert_from_mention(&mario()).unwrap().local_id().unwrap();
    let key: BTreeMap<String, Json> = serde_json::from_value(
        json!({"name": "mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma"}),
    )
    .unwrap();
    assert_eq!(reg.lookup_by_identifier("person", &key).unwrap().unwrap().local_id, id);
    let partial: BTreeMap<String, Json> = serde_json::from_value(json!({"name": "Mario"})).unwrap();
    assert!(matches!(
        reg.lookup_by_identifier("person", &partial),
        Err(RegisterError::NotAKey { .. })
    ));
    let other: BTreeMap<String, Json> = serde_json::from_value(json!({"fiscal_code": "X"})).unwrap();
    assert!(reg.lookup_by_identifier("person", &other).unwrap().is_none());
}

#[test]
fn partial_identifier_is_ambiguous_with_ranked_candidates() {
    let mut reg = register();
    let a = reg.upsert_from_mention(&mario()).unwrap().local_id().unwrap();
    let mut other = mario();
    other.attributes.insert("birth_place".into(), json!("Milano"));
    other.attributes.insert("eyes_color".into(), json!("brown"));
    let b = reg.upsert_from_mention(&other).unwrap().local_id().unwrap();

    let partial = mention("person", json!({"name": "Mario", "surname": "Rossi", "eyes_color": "brown"}));
    match reg.upsert_from_mention(&partial).unwrap() {
        UpsertOutcome::Ambiguous { candidates } => {
            let ids: Vec<_> = candidates.iter().map(|c| c.local_id).collect();
            // `a` has no eyes_color, so it stays compatible but ranks lower.
            assert_eq!(ids, vec![b, a]);
            assert_eq!(candidates[0].equal_values, 3);
            assert_eq!(candidates[1].complementary.len(), 3);
        }
        other => panic!("{other:?}"),
    }

    let green = mention("person", json!({"name": "Mario", "eyes_color": "green"}));
    let found = reg.find_candidates("person", &reg.metamodel.validate_attributes("person", &green.attributes).unwrap(), &[]);
    assert_eq!(found.iter().map(|c| c.local_id).collect::<Vec<_>>(), vec![a]);
}

#[test]
fn ambiguity_policy_create_new() {
    let mm = Arc::new(demo::metamodel());
    let mut reg = EntityRegister::with_config(
        Iid(1),
        mm,
        RegisterConfig {
            auto_create_on_ambiguous: true,
        },
    );
    reg.upsert_from_mention(&mario()).unwrap();
    let partial = mention("person", json!({"name": "Mario"}));
    assert!(matches!(reg.upsert_from_mention(&partial).unwrap(), UpsertOutcome::Created { .. }));
}

#[test]
fn attach_mention_resolves_ambiguity() {
    let mut reg = register();
    let a = reg.upsert_from_mention(&mario()).unwrap().local_id().unwrap();
    let partial = with_doc(mention("person", json!({"name": "Mario", "eyes_color": "blue"})), "d2", "a1");
    let out = reg.attach_mention(a, &partial).unwrap();
    assert!(matches!(out, UpsertOutcome::Enlarged { .. }));
    assert_eq!(reg.get(a).unwrap().provenance.len(), 1);
}

#[test]
fn find_candidates_on_empty_register() {
    let reg = register();
    let attrs = reg
        .metamodel
        .validate_attributes("person", &serde_json::from_value(json!({"name": "x"})).unwrap())
        .unwrap();
    assert!(reg.find_candidates("person", &attrs, &[]).is_empty());
}

#[test]
fn shared_relationship_endpoints_rank_candidates() {
    let mut reg = register();
    let father = person(&mut reg, "Giuseppe");
    let a = reg.upsert_from_mention(&mention("person", json!({"name": "Anna", "surname": "B", "birth_date": "1990-01-01", "birth_place": "Roma"}))).unwrap().local_id().unwrap();
    let b = reg.upsert_from_mention(&mention("person", json!({"name": "Anna", "surname": "B", "birth_date": "1990-01-01", "birth_place": "Pisa"}))).unwrap().local_id().unwrap();
    reg.add_relationship("FatherOf", father, b, None).unwrap();
    let rels = [MentionRelationship {
        rel_name: "FatherOf".into(),
        role: Role::Target,
        other: father,
        validity: None,
    }];
    let attrs = reg
        .metamodel
        .validate_attributes("person", &serde_json::from_value(json!({"name": "Anna"})).unwrap())
        .unwrap();
    let ids: Vec<_> = reg.find_candidates("person", &attrs, &rels).iter().map(|c| c.local_id).collect();
    assert_eq!(ids, vec![b, a]);
}

#[test]
fn second_father_is_a_cardinality_violation() {
    let mut reg = register();
    let (f1, f2, child) = (person(&mut reg, "f1"), person(&mut reg, "f2"), person(&mut reg, "c"));
    reg.add_relationship("FatherOf", f1, child, None).unwrap();
    assert!(matches!(
        reg.add_relationship("FatherOf", f2, child, None),
        Err(RegisterError::CardinalityViolation { .. })
    ));
    // One father may have many children.
    let c2 = person(&mut reg, "c2");
    reg.add_relationship("FatherOf", f1, c2, None).unwrap();
}

#[test]
fn father_and_mother_of_same_pair_contradict() {
    let mut reg = register();
    let (a, b) = (person(&mut reg, "a"), person(&mut reg, "b"));
    reg.add_relationship("FatherOf", a, b, None).unwrap();
    assert!(matches!(
        reg.add_relationship("MotherOf", a, b, None),
        Err(RegisterError::ContradictionViolation { .. })
    ));
    assert!(matches!(
        reg.add_relationship("GrandfatherOf", a, b, None),
        Err(RegisterError::ContradictionViolation { .. })
    ));
}

#[test]
fn reversed_father_is_rejected() {
    let mut reg = register();
    let (a, b) = (person(&mut reg, "a"), person(&mut reg, "b"));
    reg.add_relationship("FatherOf", a, b, None).unwrap();
    assert!(matches!(
        reg.add_relationship("FatherOf", b, a, None),
        Err(RegisterError::ReverseDirectionViolation { .. })
    ));
    assert!(matches!(
        reg.add_relationship("FatherOf", a, a, None),
        Err(RegisterError::ReverseDirectionViolation { .. })
    ));
    reg.add_relationship("InLoveWith", a, b, None).unwrap();
    reg.add_relationship("InLoveWith", b, a, None).unwrap();
}

#[test]
fn marriage_periods() {
    let mut reg = register();
    let (a, b, c) = (person(&mut reg, "a"), person(&mut reg, "b"), person(&mut reg, "c"));
    let first = Validity::new(d("2000-01-01"), Some(d("2005-01-01")));
    reg.add_relationship("MarriedWith", a, b, Some(first)).unwrap();
    let overlapping = Validity::new(d("2004-01-01"), None);
    assert!(matches!(
        reg.add_relationship("MarriedWith", a, c, Some(overlapping)),
        Err(RegisterError::CardinalityViolation { .. })
    ));
    // Bidirectional: c marrying b from the other side also counts.
    assert!(matches!(
        reg.add_relationship("MarriedWith", c, b, Some(overlapping)),
        Err(RegisterError::CardinalityViolation { .. })
    ));
    reg.add_relationship("MarriedWith", a, c, Some(Validity::new(d("2010-01-01"), None)))
        .unwrap();
    assert!(matches!(
        reg.add_relationship("MarriedWith", a, b, None),
        Err(RegisterError::MissingValidity(_))
    ));
}

#[test]
fn friendship_is_readable_from_both_ends_and_deduplicated() {
    let mut reg = register();
    let (a, b) = (person(&mut reg, "a"), person(&mut reg, "b"));
    let r = reg.add_relationship("FriendOf", a, b, None).unwrap();
    assert_eq!(reg.add_relationship("FriendOf", b, a, None).unwrap(), r);
    assert_eq!(reg.relationships_of(b).len(), 1);
    let rel = reg.relationship(r).unwrap();
    assert_eq!(rel.other_end(b, true), Some(a));
}

#[test]
fn type_mismatch_on_relationship() {
    let mut reg = register();
    let a = person(&mut reg, "a");
    let art = reg
        .upsert_from_mention(&mention("law_article", json!({"code": "642 c.p."})))
        .unwrap()
        .local_id()
        .unwrap();
    assert!(matches!(
        reg.add_relationship("FriendOf", a, art, None),
        Err(RegisterError::RelationshipTypeMismatch { .. })
    ));
}

#[test]
fn failed_mention_relationship_rolls_back_creation() {
    let mut reg = register();
    let (f1, f2, child) = (person(&mut reg, "f1"), person(&mut reg, "f2"), person(&mut reg, "c"));
    reg.add_relationship("FatherOf", f1, child, None).unwrap();
    let events = reg.events().len();
    let mut m = mention("person", json!({"fiscal_code": "RSSMRA80A01H501U"}));
    m.relationships.push(MentionRelationship {
        rel_name: "FatherOf".into(),
        role: Role::Source,
        other: child,
        validity: None,
    });
    assert!(matches!(reg.upsert_from_mention(&m).unwrap(), UpsertOutcome::Conflict { .. }));
    assert_eq!(reg.len(), 3);
    assert_eq!(reg.events().len(), events);
    // The id counter was rolled back too.
    let next = person(&mut reg, "z");
    assert_eq!(next, LocalId(4));
    let _ = f2;
}

#[test]
fn merge_unions_and_forwards() {
    let mut reg = register();
    let a = reg.upsert_from_mention(&with_doc(mario(), "d1", "a1")).unwrap().local_id().unwrap();
    let b = reg
        .upsert_from_mention(&with_doc(
            mention(
                "person",
                json!({"name": "Mario", "surname": "Rossi", "father": "Giuseppe", "mother": "Anna", "qualification": ["judge"]}),
            ),
            "d2",
            "a7",
        ))
        .unwrap()
        .local_id()
        .unwrap();
    let friend = person(&mut reg, "f");
    reg.add_relationship("FriendOf", friend, b, None).unwrap();

    let report = reg.merge_entities(a, b).unwrap();
    assert_eq!(report.absorbed, Some(b));
    let e = reg.get(b).unwrap();
    assert_eq!(e.local_id, a);
    assert_eq!(e.provenance.len(), 2);
    assert!(e.attributes.contains_key("father"));
    assert!(e.attributes.contains_key("birth_place"));
    assert_eq!(reg.relationships_of(a).len(), 1);
    assert!(reg.relationships_of(b).is_empty());

    let again = reg.merge_entities(a, b).unwrap();
    assert_eq!(again.absorbed, None);
    assert!(matches!(reg.events().last().unwrap().kind, SyncEventKind::MergePerformed { .. }));
}

#[test]
fn merge_guards() {
    let mut reg = register();
    let a = reg.upsert_from_mention(&mario()).unwrap().local_id().unwrap();
    let mut other = mario();
    other.attributes.insert("birth_date".into(), json!("1981-01-01"));
    let b = reg.upsert_from_mention(&other).unwrap().local_id().unwrap();
    assert!(matches!(
        reg.merge_entities(a, b),
        Err(RegisterError::IncompatibleAttributes(_))
    ));
    let art = reg
        .upsert_from_mention(&mention("law_article", json!({"code": "1"})))
        .unwrap()
        .local_id()
        .unwrap();
    assert!(matches!(reg.merge_entities(a, art), Err(RegisterError::TypeMismatch(..))));
    assert_eq!(reg.len(), 3);
}

#[test]
fn split_by_provenance() {
    let mut reg = register();
    let a = reg.upsert_from_mention(&with_doc(mario(), "d1", "a1")).unwrap().local_id().unwrap();
    reg.attach_mention(a, &with_doc(mention("person", json!({"eyes_color": "brown"})), "d2", "a2"))
        .unwrap();
    let m1 = Mention { doc_id: "d1".into(), ann_id: "a1".into() };
    let m2 = Mention { doc_id: "d2".into(), ann_id: "a2".into() };

    let bad = SplitPlan {
        keep: SplitSide { mentions: [m1.clone(), m2.clone()].into(), attributes: BTreeMap::new() },
        split_off: SplitSide::default(),
        move_relationships: vec![],
    };
    assert!(matches!(reg.split_entity(a, &bad), Err(RegisterError::IncompletePartition)));

    let plan = SplitPlan {
        keep: SplitSide {
            mentions: [m1].into(),
            attributes: serde_json::from_value(json!({"name": "Mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma"})).unwrap(),
        },
        split_off: SplitSide {
            mentions: [m2].into(),
            attributes: serde_json::from_value(json!({"name": "Mario", "eyes_color": "brown"})).unwrap(),
        },
        move_relationships: vec![],
    };
    let (kept, off) = reg.split_entity(a, &plan).unwrap();
    assert_eq!(kept.local_id, a);
    assert!(kept.provenance.is_disjoint(&off.provenance));
    let attrs = reg
        .metamodel
        .validate_attributes("person", &serde_json::from_value(json!({"name": "Mario"})).unwrap())
        .unwrap();
    let ids: Vec<_> = reg.find_candidates("person", &attrs, &[]).iter().map(|c| c.local_id).collect();
    assert_eq!(ids, vec![a, off.local_id]);
}

#[test]
fn import_is_idempotent_and_reuses_key_matches() {
    let mut reg = register();
    let local = reg.upsert_from_mention(&mario()).unwrap().local_id().unwrap();
    let record = ForeignEntity {
        origin: NodeRef::new(Iid(2), LocalId(12)),
        type_name: "person".into(),
        attributes: mario().attributes,
    };
    assert_eq!(reg.import_entity(&record).unwrap(), local);
    let other = ForeignEntity {
        origin: NodeRef::new(Iid(2), LocalId(13)),
        type_name: "person".into(),
        attributes: serde_json::from_value(json!({"name": "Luigi"})).unwrap(),
    };
    let first = reg.import_entity(&other).unwrap();
    assert_eq!(reg.import_entity(&other).unwrap(), first);
    assert_eq!(reg.len(), 2);
}

#[test]
fn delete_requires_no_mentions() {
    let mut reg = register();
    let a = reg.upsert_from_mention(&with_doc(mario(), "d1", "a1")).unwrap().local_id().unwrap();
    assert!(matches!(reg.delete_entity(a), Err(RegisterError::EntityHasMentions(_))));
    reg.remove_mention(a, &Mention { doc_id: "d1".into(), ann_id: "a1".into() }).unwrap();
    reg.delete_entity(a).unwrap();
    assert!(reg.get(a).is_none());
    assert!(matches!(reg.events().last().unwrap().kind, SyncEventKind::EntityRetired { .. }));
}

#[test]
fn outer_savepoint_rolls_back_several_operations() {
    let mut reg = register();
    let sp = reg.savepoint();
    let a = person(&mut reg, "a");
    let b = person(&mut reg, "b");
    reg.add_relationship("FriendOf", a, b, None).unwrap();
    reg.rollback_to(sp);
    assert!(reg.is_empty());
    assert_eq!(reg.relationships().count(), 0);
    assert!(reg.events().is_empty());
    assert_eq!(person(&mut reg, "c"), LocalId(1));
}

#[test]
fn dump_round_trip() {
    let mut reg = register();
    let a = reg.upsert_from_mention(&with_doc(mario(), "d1", "a1")).unwrap().local_id().unwrap();
    let b = person(&mut reg, "b");
    reg.add_relationship("FriendOf", a, b, None).unwrap();
    let c = person(&mut reg, "c");
    reg.merge_entities(b, c).unwrap_err();
    let text = reg.to_jsonl();
    let back = EntityRegister::from_jsonl(reg.metamodel.clone(), &text).unwrap();
    assert_eq!(back.to_jsonl(), text);
    assert_eq!(back.entities().cloned().collect::<Vec<_>>(), reg.entities().cloned().collect::<Vec<_>>());
    assert_eq!(back.events(), reg.events());
}

// ---- properties --------------------------------------------------------

const NAMES: &[&str] = &["Mario", "Luigi", "Anna", "Giulia"];
const SURNAMES: &[&str] = &["Rossi", "Bianchi", "Verdi"];
const COLORS: &[&str] = &["brown", "green", "blue"];
const PLACES: &[&str] = &["Roma", "Milano"];
const FISCAL_PREFIXES: &[&str] = &["RSSMRA80A01H501", "BNCLGU70A41F205", "VRDNNA71B02H501", "RSSMRA72C03F205"];

fn fiscal_code(i: usize) -> String {
    let p = FISCAL_PREFIXES[i];
    format!("{p}{}", crate::metamodel::fiscal_code::check_character(p.as_bytes()))
}

fn arb_person() -> impl Strategy<Value = BTreeMap<String, Json>> {
    (
        prop::option::of(prop::sample::select(NAMES)),
        prop::option::of(prop::sample::select(SURNAMES)),
        prop::option::of(prop::sample::select(COLORS)),
        prop::option::of(prop::sample::select(PLACES)),
        prop::option::of(1970i32..1973),
        prop::option::of(0u8..4),
        prop::collection::vec(prop::sample::select(&["judge", "lawyer", "clerk"][..]), 0..3),
    )
        .prop_map(|(n, s, c, p, y, fc, q)| {
            let mut m = BTreeMap::new();
            if let Some(n) = n {
                m.insert("name".into(), json!(n));
            }
            if let Some(s) = s {
                m.insert("surname".into(), json!(s));
            }
            if let Some(c) = c {
                m.insert("eyes_color".into(), json!(c));
            }
            if let Some(p) = p {
                m.insert("birth_place".into(), json!(p));
            }
            if let Some(y) = y {
                m.insert("birth_date".into(), json!(format!("{y}-01-01")));
            }
            if let Some(fc) = fc {
                m.insert("fiscal_code".into(), json!(fiscal_code(fc as usize)));
            }
            if !q.is_empty() {
                m.insert("qualification".into(), json!(q));
            }
            m
        })
}

#[derive(Clone, Debug)]
enum Op {
    Upsert(BTreeMap<String, Json>),
    Rel(&'static str, usize, usize, Option<(i32, Option<i32>)>),
    Merge(usize, usize),
}

fn arb_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => arb_person().prop_map(Op::Upsert),
        3 => (
            prop::sample::select(&["FatherOf", "MotherOf", "GrandfatherOf", "FriendOf", "MarriedWith", "InLoveWith"][..]),
            0usize..12,
            0usize..12,
            prop::option::of((1990i32..2010, prop::option::of(1i32..8))),
        )
            .prop_map(|(r, a, b, v)| Op::Rel(r, a, b, v)),
        1 => (0usize..12, 0usize..12).prop_map(|(a, b)| Op::Merge(a, b)),
    ]
}

fn run_ops(ops: &[Op]) -> EntityRegister {
    let mut reg = EntityRegister::with_config(
        Iid(1),
        Arc::new(demo::metamodel()),
        RegisterConfig {
            auto_create_on_ambiguous: true,
        },
    );
    for op in ops {
        let ids: Vec<LocalId> = reg.entities().map(|e| e.local_id).collect();
        let pick = |i: usize| ids.get(i % ids.len().max(1)).copied();
        match op {
            Op::Upsert(attrs) => {
                let _ = reg.upsert_from_mention(&mention("person", json!(attrs)));
            }
            Op::Rel(rel, a, b, v) => {
                if let (Some(a), Some(b)) = (pick(*a), pick(*b)) {
                    let needs = reg.metamodel.relationship(rel).unwrap().has_validity_period;
                    let validity = match (needs, v) {
                        (true, Some((y, len))) => Some(Validity::new(
                            d(&format!("{y}-01-01")),
                            len.map(|l| d(&format!("{}-01-01", y + l))),
                        )),
                        (true, None) => Some(Validity::new(d("2000-01-01"), None)),
                        _ => None,
                    };
                    let _ = reg.add_relationship(rel, a, b, validity);
                }
            }
            Op::Merge(a, b) => {
                if let (Some(a), Some(b)) = (pick(*a), pick(*b)) {
                    let _ = reg.merge_entities(a, b);
                }
            }
        }
    }
    reg
}

/// Linear scan oracle for `find_candidates`.
fn brute_candidates(
    reg: &EntityRegister,
    type_name: &str,
    partial: &AttributeMap,
) -> Vec<(LocalId, usize)> {
    let mut out: Vec<(LocalId, usize)> = reg
        .entities()
        .filter(|e| e.type_name == type_name)
        .filter(|e| {
            partial.iter().all(|(k, v)| match (v, e.attributes.get(k)) {
                (Value::List(_), _) | (_, None) => true,
                (v, Some(w)) => v.same_as(w),
            })
        })
        .map(|e| {
            let mut equal = 0;
            for (k, v) in partial {
                match (v, e.attributes.get(k)) {
                    (Value::List(xs), Some(Value::List(ys))) => {
                        equal += xs
                            .iter()
                            .filter(|x| ys.iter().any(|y| x.to_lowercase() == y.to_lowercase()))
                            .count()
                    }
                    (v, Some(w)) if v.same_as(w) => equal += 1,
                    _ => {}
                }
            }
            (e.local_id, equal)
        })
        .collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn find_candidates_matches_linear_scan(ops in prop::collection::vec(arb_op(), 0..60), probe in arb_person()) {
        let reg = run_ops(&ops);
        let partial = reg.metamodel.validate_attributes("person", &probe).unwrap();
        let got: Vec<(LocalId, usize)> = reg
            .find_candidates("person", &partial, &[])
            .iter()
            .map(|c| (c.local_id, c.equal_values))
            .collect();
        let expected = if partial.is_empty() { vec![] } else { brute_candidates(&reg, "person", &partial) };
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn keys_stay_unique_and_constraints_hold(ops in prop::collection::vec(arb_op(), 0..80)) {
        let reg = run_ops(&ops);
        let t = reg.metamodel.entity_type("person").unwrap().clone();
        let mut seen = BTreeSet::new();
        for e in reg.entities() {
            for (idx, key) in t.complete_keys(&e.attributes) {
                prop_assert!(seen.insert((idx, key_string(key, &e.attributes))), "duplicate key on {:?}", e.local_id);
            }
        }
        prop_assert!(reg.audit_relationships().is_empty());
        for r in reg.relationships() {
            prop_assert!(reg.entities.contains_key(&r.source) && reg.entities.contains_key(&r.target));
        }
    }

    #[test]
    fn upsert_is_deterministic(ops in prop::collection::vec(arb_op(), 0..50)) {
        prop_assert_eq!(run_ops(&ops).to_jsonl(), run_ops(&ops).to_jsonl());
    }

    #[test]
    fn failed_operations_leave_no_trace(ops in prop::collection::vec(arb_op(), 0..50), extra in arb_op()) {
        let mut reg = run_ops(&ops);
        let before = reg.to_jsonl();
        let ids: Vec<LocalId> = reg.entities().map(|e| e.local_id).collect();
        if let (Op::Rel(rel, a, b, _), false) = (&extra, ids.is_empty()) {
            let (a, b) = (ids[a % ids.len()], ids[b % ids.len()]);
            if reg.add_relationship(rel, a, b, None).is_err() {
                prop_assert_eq!(reg.to_jsonl(), before.clone());
            }
        }
        if let (Op::Merge(a, b), false) = (&extra, ids.is_empty()) {
            if reg.merge_entities(ids[a % ids.len()], ids[b % ids.len()]).is_err() {
                prop_assert_eq!(reg.to_jsonl(), before);
            }
        }
    }

    #[test]
    fn split_after_merge_restores_mentions(a in arb_person(), b in arb_person()) {
        let mut reg = register();
        let ma = with_doc(mention("person", json!(a)), "d1", "x");
        let mb = with_doc(mention("person", json!(b)), "d2", "y");
        let Some(ia) = reg.create_from_mention(&ma).unwrap().local_id() else { return Ok(()) };
        let Some(ib) = reg.create_from_mention(&mb).unwrap().local_id() else { return Ok(()) };
        let before_a = reg.get(ia).unwrap().clone();
        let before_b = reg.get(ib).unwrap().clone();
        if reg.merge_entities(ia, ib).is_err() {
            return Ok(());
        }
        let plan = SplitPlan {
            keep: SplitSide { mentions: before_a.provenance.clone(), attributes: ma.attributes.clone() },
            split_off: SplitSide { mentions: before_b.provenance.clone(), attributes: mb.attributes.clone() },
            move_relationships: vec![],
        };
        let (ka, kb) = reg.split_entity(ia, &plan).unwrap();
        prop_assert_eq!(ka.provenance, before_a.provenance);
        prop_assert_eq!(kb.provenance, before_b.provenance);
        prop_assert!(ka.attributes.iter().all(|(k, v)| before_a.attributes.get(k).is_some_and(|w| w.same_as(v))));
    }
}
