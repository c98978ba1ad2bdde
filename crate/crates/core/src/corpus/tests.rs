use super::*;
use proptest::prelude::*;

fn sections(items: &[(&str, &str)]) -> Vec<SectionInput> {
    items
        .iter()
        .map(|(n, c)| SectionInput {
            name: n.to_string(),
            content: c.to_string(),
        })
        .collect()
}

fn meta(items: &[(&str, &str)]) -> Vec<(String, String)> {
    items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
}

fn demo_corpus() -> Corpus {
    let mut c = Corpus::new(Iid(1));
    c.ingest_document(
        "d1",
        &meta(&[("case_no", "123/2020"), ("year", "2020"), ("judge", "Rossi")]),
        &sections(&[
            ("Preamble", "Il giudice Rossi, letto il ricorso di Mario Rossi. "),
            ("Conclusion", "Respinge il ricorso ai sensi dell'art. 642 c.p."),
        ]),
        ChunkStrategy::Words,
    )
    .unwrap();
    c.ingest_document(
        "d2",
        &meta(&[("year", "2021")]),
        &sections(&[("Preamble", "Ricorso di Anna Bianchi contro Mario Rossi, Rossi, Rossi.")]),
        ChunkStrategy::Paragraph,
    )
    .unwrap();
    c
}

#[test]
fn ingest_sections_offsets_and_chunks() {
    let c = demo_corpus();
    let d = c.document("d1").unwrap();
    assert_eq!(d.sections.len(), 2);
    assert_eq!(d.instance_id, Iid(1));
    assert_eq!(d.sections[1].char_offset, d.sections[0].content.chars().count());
    let joined: String = d.sections[0].chunks.iter().map(|c| c.content.as_str()).collect();
    assert_eq!(joined, d.sections[0].content);
    assert_eq!(d.sections[0].chunks[0].content, "Il ");
}

#[test]
fn ingest_errors() {
    let mut c = demo_corpus();
    assert_eq!(
        c.ingest_document("d1", &[], &sections(&[("S", "x")]), ChunkStrategy::Words).unwrap_err(),
        CorpusError::DuplicateDocId("d1".into())
    );
    assert_eq!(
        c.ingest_document("d3", &[], &sections(&[("S", "")]), ChunkStrategy::Words).unwrap_err(),
        CorpusError::EmptyDocument
    );
    assert_eq!(
        c.ingest_document("d3", &meta(&[("a", "1"), ("a", "2")]), &sections(&[("S", "x")]), ChunkStrategy::Words)
            .unwrap_err(),
        CorpusError::DuplicateMetadata("a".into())
    );
}

#[test]
fn annotations_validate_span_and_entity() {
    let mut c = demo_corpus();
    let text = c.document("d1").unwrap().full_text();
    let start = text.find("Mario Rossi").unwrap();
    let start = text[..start].chars().count();
    let span = (start, start + "Mario Rossi".chars().count());
    let ann = c.add_annotation("d1", "person", span, Some(LocalId(12)), |id| id == LocalId(12)).unwrap().clone();
    assert_eq!(c.annotated_text(&ann).unwrap(), "Mario Rossi");
    assert_eq!(ann.entity_ref, Some(LocalId(12)));
    c.add_annotation("d1", "law_article", (0, 2), None, |_| false).unwrap();
    assert!(matches!(
        c.add_annotation("d1", "person", (5, 5), None, |_| true),
        Err(CorpusError::SpanOutOfBounds { .. })
    ));
    assert!(matches!(
        c.add_annotation("d1", "person", (0, 2), Some(LocalId(99)), |_| false),
        Err(CorpusError::DanglingEntityRef(_))
    ));
}

#[test]
fn search_by_metadata_terms_and_entity() {
    let mut c = demo_corpus();
    assert!(matches!(c.search(&SearchQuery::default()), Err(CorpusError::EmptyQuery)));
    let by_year = c
        .search(&SearchQuery {
            metadata_filters: [("year".to_string(), "2020".to_string())].into(),
            ..Default::default()
        })
        .unwrap();
    assert_eq!(by_year.iter().map(|h| h.doc_id.as_str()).collect::<Vec<_>>(), ["d1"]);

    let none = c
        .search(&SearchQuery {
            text_terms: vec!["nonexistentword".into()],
            ..Default::default()
        })
        .unwrap();
    assert!(none.is_empty());

    let rossi = c
        .search(&SearchQuery {
            text_terms: vec!["rossi".into()],
            ..Default::default()
        })
        .unwrap();
    // d2 has three occurrences, d1 two.
    assert_eq!(rossi.iter().map(|h| (h.doc_id.as_str(), h.score)).collect::<Vec<_>>(), [("d2", 3), ("d1", 2)]);

    c.add_annotation("d2", "person", (11, 23), Some(LocalId(12)), |_| true).unwrap();
    let by_entity = c
        .search(&SearchQuery {
            entity_ref: Some(LocalId(12)),
            ..Default::default()
        })
        .unwrap();
    assert_eq!(by_entity.len(), 1);
    assert_eq!(by_entity[0].spans, vec![(11, 23)]);
}

#[test]
fn replication_preserves_text_and_is_idempotent() {
    let src = demo_corpus();
    let mut dst = Corpus::new(Iid(2));
    let t = src.export_document("d1").unwrap();
    let copy = dst.receive_replica(&t, ChunkStrategy::Paragraph).unwrap().clone();
    assert_eq!(copy.instance_id, Iid(2));
    assert_eq!(copy.full_text(), src.document("d1").unwrap().full_text());
    assert_eq!(copy.metadata, src.document("d1").unwrap().metadata);
    assert_eq!(dst.receive_replica(&t, ChunkStrategy::Words).unwrap(), &copy);
    dst.rechunk("d1", ChunkStrategy::Words).unwrap();
    for s in &dst.document("d1").unwrap().sections {
        assert_eq!(s.chunks.iter().map(|c| c.content.as_str()).collect::<String>(), s.content);
    }
    let mut same = demo_corpus();
    assert!(matches!(
        same.receive_replica(&t, ChunkStrategy::Paragraph),
        Err(CorpusError::DuplicateDocId(_))
    ));
}

#[test]
fn state_round_trip_rebuilds_indexes() {
    let mut c = demo_corpus();
    c.add_annotation("d2", "person", (11, 23), Some(LocalId(3)), |_| true).unwrap();
    let back = Corpus::from_state(Iid(1), serde_json::from_str(&serde_json::to_string(&c.state()).unwrap()).unwrap());
    let q = SearchQuery {
        text_terms: vec!["ricorso".into()],
        entity_ref: Some(LocalId(3)),
        ..Default::default()
    };
    assert_eq!(back.search(&q).unwrap(), c.search(&q).unwrap());
    assert_eq!(back.next_annotation_id(), c.next_annotation_id());
}

#[test]
fn remove_document_drops_annotations_and_index() {
    let mut c = demo_corpus();
    c.add_annotation("d2", "person", (11, 23), Some(LocalId(3)), |_| true).unwrap();
    c.remove_document("d2").unwrap();
    assert!(c.annotations_for_entity(LocalId(3)).is_empty());
    let hits = c
        .search(&SearchQuery {
            text_terms: vec!["anna".into()],
            ..Default::default()
        })
        .unwrap();
    assert!(hits.is_empty());
}

const WORDS: &[&str] = &["rossi", "mario", "ricorso", "giudice", "anna", "città", "642"];

fn arb_doc() -> impl Strategy<Value = (Vec<String>, u8, Vec<(u8, u8, u8)>)> {
    (
        prop::collection::vec(prop::sample::select(WORDS).prop_map(String::from), 1..30),
        0u8..3,
        prop::collection::vec((0u8..40, 1u8..5, 0u8..4), 0..6),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn search_matches_linear_scan(
        docs in prop::collection::vec(arb_doc(), 1..25),
        terms in prop::collection::vec(prop::sample::select(WORDS), 0..3),
        year in prop::option::of(0u8..3),
        entity in prop::option::of(0u64..4),
        tag in prop::option::of(prop::sample::select(&["person", "law_article"][..])),
    ) {
        let mut c = Corpus::new(Iid(1));
        for (i, (words, y, anns)) in docs.iter().enumerate() {
            let text = words.join(" ");
            let id = format!("doc{i:03}");
            c.ingest_document(&id, &[("year".into(), format!("{}", 2020 + *y as u32))], &[SectionInput { name: "S".into(), content: text.clone() }], ChunkStrategy::Words).unwrap();
            let len = text.chars().count();
            for (s, l, e) in anns {
                let start = (*s as usize) % len;
                let end = (start + *l as usize).min(len);
                let tag = if e % 2 == 0 { "person" } else { "law_article" };
                let _ = c.add_annotation(&id, tag, (start, end), Some(LocalId(*e as u64)), |_| true);
            }
        }
        let q = SearchQuery {
            text_terms: terms.iter().map(|t| t.to_string()).collect(),
            metadata_filters: year.map(|y| [("year".to_string(), format!("{}", 2020 + y as u32))].into()).unwrap_or_default(),
            tag: tag.map(String::from),
            entity_ref: entity.map(LocalId),
        };
        if q.is_empty() {
            return Ok(());
        }
        let got: Vec<(String, usize)> = c.search(&q).unwrap().into_iter().map(|h| (h.doc_id, h.score)).collect();

        let mut expected: Vec<(String, usize)> = c
            .documents()
            .filter(|d| q.metadata_filters.iter().all(|(k, v)| d.metadata.get(k) == Some(v)))
            .filter(|d| {
                c.annotations()
                    .filter(|a| a.doc_id == d.doc_id)
                    .any(|a| q.tag.as_ref().is_none_or(|t| &a.tag == t) && q.entity_ref.is_none_or(|e| a.entity_ref == Some(e)))
                    || (q.tag.is_none() && q.entity_ref.is_none())
            })
            .filter_map(|d| {
                let text = d.full_text();
                let words: Vec<String> = text.split(' ').map(|w| w.to_lowercase()).collect();
                let mut score = 0;
                for t in &q.text_terms {
                    let n = words.iter().filter(|w| *w == t).count();
                    if n == 0 {
                        return None;
                    }
                    score += n;
                }
                Some((d.doc_id.clone(), score))
            })
            .collect();
        expected.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        prop_assert_eq!(got, expected);
    }
}
