use std::sync::Arc;

use serde_json::json;

use super::*;
use crate::access_control::PermissionTables;
use crate::corpus::CorpusError;
use crate::demo;
use crate::ids::Iid;

fn district() -> District {
    District::new(Iid(1), Arc::new(demo::metamodel()), &PermissionTables::default())
}

fn doc(id: &str, text: &str, annotations: serde_json::Value) -> IngestDocument {
    serde_json::from_value(json!({
        "doc_id": id,
        "metadata": {"year": "2020"},
        "sections": [{"name": "Body", "content": text}],
        "annotations": annotations,
    }))
    .unwrap()
}

fn mario_doc(id: &str, extra: serde_json::Value) -> IngestDocument {
    let mut attrs = json!({"name": "Mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma"});
    for (k, v) in extra.as_object().unwrap() {
        attrs[k] = v.clone();
    }
    doc(
        id,
        "Mario Rossi appeared.",
        json!([{"tag": "person", "start": 0, "end": 11, "entity": {"type": "person", "attributes": attrs}}]),
    )
}

fn fingerprint(d: &District) -> String {
    let corpus = serde_json::to_string(&d.corpus().state()).unwrap();
    let pending = serde_json::to_string(&d.pending().collect::<Vec<_>>()).unwrap();
    format!("{}|{corpus}|{pending}", d.register().to_jsonl())
}

#[test]
fn one_person_gives_one_entity_one_binding_one_event() {
    let mut d = district();
    let r = run_pipeline(&mut d, &mario_doc("d1", json!({})), None, PipelineOptions::default()).unwrap();
    assert_eq!(r.annotations.len(), 1);
    assert!(matches!(r.annotations[0].outcome, Some(UpsertOutcome::Created { .. })));
    let id = r.annotations[0].entity_ref.unwrap();
    assert_eq!(d.corpus().annotation(&r.annotations[0].ann_id).unwrap().entity_ref, Some(id));
    assert_eq!(r.events.len(), 1);
    assert_eq!(
        d.register().get(id).unwrap().provenance.iter().next().unwrap().ann_id,
        r.annotations[0].ann_id
    );
}

#[test]
fn second_document_matches_existing_person() {
    let mut d = district();
    run_pipeline(&mut d, &mario_doc("d1", json!({})), None, PipelineOptions::default()).unwrap();
    let r = run_pipeline(
        &mut d,
        &mario_doc("d2", json!({"eyes_color": "brown"})),
        None,
        PipelineOptions::default(),
    )
    .unwrap();
    assert!(matches!(r.annotations[0].outcome, Some(UpsertOutcome::Enlarged { .. })));
    assert_eq!(d.register().len(), 1);
    let r = run_pipeline(&mut d, &mario_doc("d3", json!({})), None, PipelineOptions::default()).unwrap();
    assert!(matches!(r.annotations[0].outcome, Some(UpsertOutcome::Matched { .. })));
    assert!(r.events.is_empty());
    assert_eq!(d.register().get(LocalId(1)).unwrap().provenance.len(), 3);
}

#[test]
fn partial_identifier_becomes_pending_and_unbound() {
    let mut d = district();
    run_pipeline(&mut d, &mario_doc("d1", json!({})), None, PipelineOptions::default()).unwrap();
    let partial = doc(
        "d2",
        "Rossi was there.",
        json!([{"tag": "person", "start": 0, "end": 5, "entity": {"type": "person", "attributes": {"surname": "Rossi"}}}]),
    );
    let r = run_pipeline(&mut d, &partial, None, PipelineOptions::default()).unwrap();
    assert!(matches!(r.annotations[0].outcome, Some(UpsertOutcome::Ambiguous { .. })));
    assert_eq!(r.annotations[0].entity_ref, None);
    let pid = r.annotations[0].pending.unwrap();
    let item = d.pending().next().unwrap().clone();
    assert_eq!(item.id, pid);
    assert_eq!(item.candidates, vec![LocalId(1)]);

    let out = d
        .resolve_pending(pid, crate::district::PendingChoice::Attach { local_id: LocalId(1) })
        .unwrap();
    assert_eq!(out.local_id(), Some(LocalId(1)));
    assert_eq!(d.corpus().annotation(&item.ann_id).unwrap().entity_ref, Some(LocalId(1)));
    assert_eq!(d.pending().count(), 0);
}

#[test]
fn duplicate_document_is_rejected_without_side_effects() {
    let mut d = district();
    run_pipeline(&mut d, &mario_doc("d1", json!({})), None, PipelineOptions::default()).unwrap();
    let before = fingerprint(&d);
    assert!(matches!(
        run_pipeline(&mut d, &mario_doc("d1", json!({})), None, PipelineOptions::default()),
        Err(IngestError::Corpus(CorpusError::DuplicateDocId(_)))
    ));
    assert_eq!(fingerprint(&d), before);
}

#[test]
fn a_failure_at_any_stage_leaves_nothing_behind() {
    let rich = doc(
        "d2",
        "Luigi Rossi is the father of Mario Rossi; Rossi again.",
        json!([
            {"tag": "person", "start": 0, "end": 11, "entity": {"type": "person",
                "attributes": {"name": "Luigi", "surname": "Rossi", "birth_date": "1950-01-01", "birth_place": "Roma"},
                "relationships": [{"rel_name": "FatherOf", "annotation": 1}]}},
            {"tag": "person", "start": 29, "end": 40, "entity": {"type": "person",
                "attributes": {"name": "Mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma", "eyes_color": "green"}}},
            {"tag": "person", "start": 42, "end": 47, "entity": {"type": "person", "attributes": {"surname": "Rossi"}}},
            {"tag": "Section", "start": 0, "end": 5}
        ]),
    );
    for stage in Stage::ALL {
        let mut d = district();
        run_pipeline(&mut d, &mario_doc("d1", json!({})), None, PipelineOptions::default()).unwrap();
        let before = fingerprint(&d);
        let err = run_pipeline(&mut d, &rich, None, PipelineOptions { fail_after: Some(stage) }).unwrap_err();
        assert_eq!(err, IngestError::InjectedFault(stage));
        assert_eq!(fingerprint(&d), before, "stage {stage:?}");
        // And the same input then succeeds, identically each time.
        let ok = run_pipeline(&mut d, &rich, None, PipelineOptions::default()).unwrap();
        let mut again = district();
        run_pipeline(&mut again, &mario_doc("d1", json!({})), None, PipelineOptions::default()).unwrap();
        assert_eq!(run_pipeline(&mut again, &rich, None, PipelineOptions::default()).unwrap(), ok);
        assert!(ok.relationship_errors.is_empty());
        assert_eq!(d.register().relationships().count(), 1);
        assert_eq!(ok.annotations[3].entity_ref, None);
        assert!(ok.annotations[3].outcome.is_none());
    }
}

#[test]
fn bad_span_aborts_the_document() {
    let mut d = district();
    let before = fingerprint(&d);
    let bad = doc("d1", "short", json!([{"tag": "person", "start": 2, "end": 50}]));
    assert!(matches!(
        run_pipeline(&mut d, &bad, None, PipelineOptions::default()),
        Err(IngestError::InvalidAnnotation { index: 0, .. })
    ));
    assert_eq!(fingerprint(&d), before);
}

#[test]
fn raw_path_uses_rules_and_keeps_attribute_free_drafts_type_only() {
    let g = Gazetteer::from_json(
        r#"{"rule_sets": {"demo": [
            {"pattern": "art\\. (\\d+) c\\.p\\.", "tag": "law_article", "attribute_extractors": {"code": 1}},
            {"pattern": "Tribunale", "tag": "court", "literal": true},
            {"pattern": "avv\\.", "tag": "person"}
        ]}}"#,
    )
    .unwrap();
    let rules = g.rule_set("demo").unwrap();
    assert!(matches!(g.rule_set("none"), Err(IngestError::UnknownRuleSet(_))));
    let mut d = district();
    let raw = doc("r1", "Il Tribunale applica l'art. 642 c.p. su istanza dell'avv. Neri.", json!([]));
    let r = run_pipeline(&mut d, &raw, Some(&rules), PipelineOptions::default()).unwrap();
    let tags: Vec<&str> = r.annotations.iter().map(|a| a.tag.as_str()).collect();
    assert_eq!(tags, vec!["court", "law_article", "person"]);
    assert!(r.annotations[0].outcome.is_none());
    assert!(r.annotations[2].outcome.is_none());
    let law = r.annotations[1].entity_ref.unwrap();
    assert_eq!(d.register().get(law).unwrap().attributes["code"].to_json(), json!("642"));
    assert_eq!(d.register().len(), 1);
}
