//! HTTP interfaces of both instance roles, served in-process on loopback.

use std::path::Path;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use ereg_core::service::{self, Client, InstanceConfig, Role, RunningInstance, StartError, SyncMode};

async fn top(dir: &Path) -> RunningInstance {
    service::start(InstanceConfig::new(Role::TopLevel, dir.join("top"))).await.unwrap()
}

async fn district(dir: &Path, name: &str, parent: &str, mode: SyncMode) -> RunningInstance {
    let mut cfg = InstanceConfig::new(Role::District, dir.join(name));
    cfg.parent = Some(parent.to_string());
    cfg.sync_mode = mode;
    cfg.gazetteer = Some(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/gazetteer.json"));
    service::start(cfg).await.unwrap()
}

async fn call(c: &Client, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
    c.raw(method, path, body.as_ref()).await.unwrap()
}

async fn ok(c: &Client, method: &str, path: &str, body: Option<Value>) -> Value {
    let (status, v) = call(c, method, path, body).await;
    assert!((200..300).contains(&status), "{method} {path}: {status} {v}");
    v
}

fn person_doc(doc_id: &str, text_name: &str, attrs: Value, owners: Value) -> Value {
    let text = format!("{text_name} appeared before the court.");
    json!({
        "doc_id": doc_id,
        "metadata": {"kind": "divorce"},
        "sections": [{"name": "Body", "content": text}],
        "annotations": [{"tag": "person", "start": 0, "end": text_name.chars().count(),
                         "entity": {"type": "person", "attributes": attrs}}],
        "owners": owners,
    })
}

fn mario_a() -> Value {
    json!({"name": "Mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma"})
}

fn mario_b() -> Value {
    json!({"name": "Mario", "surname": "Rossi", "birth_year": 1980, "father": "Luigi", "mother": "Anna"})
}

async fn eventually(c: &Client, path: &str, pointer: &str, want: Value) -> Value {
    let deadline = Instant::now() + Duration::from_secs(15);
    loop {
        let (status, v) = call(c, "GET", path, None).await;
        if status == 200 && v.pointer(pointer) == Some(&want) {
            return v;
        }
        assert!(Instant::now() < deadline, "{path}{pointer} never became {want}; last {v}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn two_districts_make_a_three_row_hierarchy() {
    let dir = tempfile::tempdir().unwrap();
    let t = top(dir.path()).await;
    let d1 = district(dir.path(), "d1", &t.address, SyncMode::Eager).await;
    let d2 = district(dir.path(), "d2", &t.address, SyncMode::Eager).await;
    let tc = Client::new(&t.address);
    let rows = ok(&tc, "GET", "/registry/instances", None).await;
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert_eq!(rows[1]["level"], json!(-1));
    assert_eq!(rows[2]["parent_iid"], json!(0));
    let h = ok(&Client::new(&d2.address), "GET", "/health", None).await;
    assert_eq!(h["iid"], json!(2));
    assert_eq!(h["role"], json!("district"));
    d1.stop().await;
    d2.stop().await;
    t.stop().await;
}

#[tokio::test]
async fn role_and_parent_must_agree_before_anything_starts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = InstanceConfig::new(Role::District, dir.path().join("d"));
    assert!(matches!(service::start(cfg).await, Err(StartError::Config(_))));
    let mut cfg = InstanceConfig::new(Role::TopLevel, dir.path().join("t"));
    cfg.parent = Some("http://127.0.0.1:1".into());
    assert!(matches!(service::start(cfg).await, Err(StartError::Config(_))));
}

#[tokio::test(flavor = "multi_thread")]
async fn sync_messages_are_checked_and_redelivery_is_harmless() {
    let dir = tempfile::tempdir().unwrap();
    let t = top(dir.path()).await;
    let d = district(dir.path(), "d1", &t.address, SyncMode::OnQuery).await;
    let (tc, dc) = (Client::new(&t.address), Client::new(&d.address));
    ok(&dc, "POST", "/ingest", Some(person_doc("a", "Mario Rossi", mario_a(), json!([])))).await;
    let msg = ok(&dc, "GET", "/sync/events?after=0", None).await;
    assert_eq!(msg["events"].as_array().unwrap().len(), 1);

    let mut wrong = msg.clone();
    wrong["proto_version"] = json!(99);
    let (status, body) = call(&tc, "POST", "/sync/events", Some(wrong)).await;
    assert_eq!((status, body["error"].clone()), (400, json!("protocol_version")));
    let mut stranger = msg.clone();
    stranger["iid"] = json!(42);
    assert_eq!(call(&tc, "POST", "/sync/events", Some(stranger)).await.0, 404);

    let first = ok(&tc, "POST", "/sync/events", Some(msg.clone())).await;
    assert_eq!(first["outcomes"].as_array().unwrap().len(), 1);
    let hash = ok(&tc, "GET", "/state", None).await["hash"].clone();
    let again = ok(&tc, "POST", "/sync/events", Some(msg)).await;
    assert_eq!(again["duplicates"], json!([1]));
    assert_eq!(ok(&tc, "GET", "/state", None).await["hash"], hash);

    // A gap is refused with the seq the top level expects.
    let mut gap = ok(&dc, "GET", "/sync/events?after=0", None).await;
    gap["events"][0]["seq"] = json!(5);
    let (status, body) = call(&tc, "POST", "/sync/events", Some(gap)).await;
    assert_eq!((status, body["error"].clone(), body["expected"].clone()), (409, json!("seq_gap"), json!(2)));
    d.stop().await;
    t.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn action_requests_are_claimed_resolved_once_and_pushed_down() {
    let dir = tempfile::tempdir().unwrap();
    let t = top(dir.path()).await;
    let d1 = district(dir.path(), "d1", &t.address, SyncMode::Eager).await;
    let d2 = district(dir.path(), "d2", &t.address, SyncMode::Eager).await;
    let owners = json!([{"user": "olga", "level": "owner"}]);
    let (tc, c1, c2) = (Client::new(&t.address), Client::new(&d1.address), Client::new(&d2.address));
    ok(&c1, "POST", "/ingest", Some(person_doc("a", "Mario Rossi", mario_a(), owners.clone()))).await;
    let r = ok(&c2, "POST", "/ingest", Some(person_doc("b", "Mario Rossi", mario_b(), owners))).await;
    assert_eq!(r["sync"]["status"], json!("pushed"));

    let open = ok(&tc, "GET", "/action-requests?status=open", None).await;
    assert_eq!(open.as_array().unwrap().len(), 1);
    let id = open[0]["request_id"].as_u64().unwrap();
    let gid = open[0]["ids"][0].clone();
    assert_eq!(ok(&c2, "GET", "/health", None).await["bound"], json!(0));

    let claimed = ok(&tc, "POST", &format!("/action-requests/{id}/claim"), Some(json!({"actor": "master"}))).await;
    assert_eq!(claimed["history"].as_array().unwrap().last().unwrap()["status"], json!("InProgress"));
    let in_progress = ok(&tc, "GET", "/action-requests?status=in_progress", None).await;
    assert_eq!(in_progress.as_array().unwrap().len(), 1);

    let path = format!("/action-requests/{id}/resolution");
    let decision = json!({"proto_version": 1, "actor": "mallory", "decision": "merge", "global_id": gid});
    let (status, body) = call(&tc, "POST", &path, Some(decision)).await;
    assert_eq!((status, body["error"].clone()), (403, json!("unauthorized_actor")));
    let decision = json!({"proto_version": 1, "actor": "master", "decision": "merge", "global_id": gid});
    ok(&tc, "POST", &path, Some(decision.clone())).await;
    let (status, body) = call(&tc, "POST", &path, Some(decision)).await;
    assert_eq!((status, body["error"].clone()), (409, json!("already_resolved")));

    let b = ok(&tc, "GET", &format!("/entities/global/{gid}/bindings"), None).await;
    assert_eq!(b["bindings"], json!([[1, 1], [2, 1]]));
    assert_eq!(ok(&c2, "GET", "/health", None).await["bound"], json!(1));

    // The global view is assembled from fragments each owner renders.
    let hit = ok(&tc, "GET", &format!("/entities/{gid}?as_user=olga"), None).await;
    assert_eq!(hit["fragments"].as_array().unwrap().len(), 2);
    assert_eq!(hit["denied"], json!(0));
    let (status, _) = call(&tc, "GET", &format!("/entities/{gid}?as_user=nobody"), None).await;
    assert_eq!(status, 403);
    let audit = ok(&tc, "GET", "/audit", None).await;
    assert_eq!(audit["ok"], json!(true));
    for i in [d1, d2, t] {
        i.stop().await;
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn on_query_districts_answer_now_and_complete_after_a_pull() {
    let dir = tempfile::tempdir().unwrap();
    let t = top(dir.path()).await;
    let d = district(dir.path(), "d1", &t.address, SyncMode::OnQuery).await;
    let (tc, dc) = (Client::new(&t.address), Client::new(&d.address));
    let owners = json!([{"user": "olga", "level": "owner"}]);
    let r = ok(&dc, "POST", "/ingest", Some(person_doc("a", "Mario Rossi", mario_a(), owners))).await;
    assert_eq!(r["sync"]["status"], json!("deferred"));
    assert_eq!(ok(&tc, "GET", "/audit", None).await["watermarks"]["1"], json!(0));

    let q = ok(&dc, "GET", "/query/entities?type=person&as_user=olga&surname=Rossi", None).await;
    assert_eq!(q["local_hits"].as_array().unwrap().len(), 1);
    assert_eq!(q["federated_hits"], json!([]));
    assert_eq!(q["completeness"]["status"], json!("pending_sync"));
    let token = q["completeness"]["token"].as_str().unwrap().to_string();
    let done = eventually(&dc, &format!("/query/pending/{token}"), "/completeness/status", json!("fresh")).await;
    assert_eq!(done["federated_hits"].as_array().unwrap().len(), 1);
    assert_eq!(ok(&tc, "GET", "/audit", None).await["watermarks"]["1"], json!(1));
    assert_eq!(call(&dc, "GET", "/query/pending/nope", None).await.0, 404);
    d.stop().await;
    t.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn batch_districts_catch_up_on_their_timer() {
    let dir = tempfile::tempdir().unwrap();
    let t = top(dir.path()).await;
    let d = district(dir.path(), "d1", &t.address, SyncMode::Batch { interval_ms: 100 }).await;
    let (tc, dc) = (Client::new(&t.address), Client::new(&d.address));
    for i in 0..5 {
        let attrs = json!({"vat_number": format!("IT{i:011}"), "name": format!("Firm {i}")});
        let doc = json!({
            "doc_id": format!("o{i}"), "sections": [{"name": "Body", "content": "Firm Srl signed."}],
            "annotations": [{"tag": "organization", "start": 0, "end": 8,
                             "entity": {"type": "organization", "attributes": attrs}}],
        });
        ok(&dc, "POST", "/ingest", Some(doc)).await;
    }
    eventually(&tc, "/audit", "/watermarks/1", json!(5)).await;
    eventually(&dc, "/health", "/acked", json!(5)).await;
    d.stop().await;
    t.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn exploration_endpoints_respect_the_viewer() {
    let dir = tempfile::tempdir().unwrap();
    let t = top(dir.path()).await;
    let d = district(dir.path(), "d1", &t.address, SyncMode::Eager).await;
    let dc = Client::new(&d.address);
    let text = "Luigi Rossi is the father of Mario Rossi.";
    let doc = json!({
        "doc_id": "f1", "metadata": {"kind": "divorce"},
        "sections": [{"name": "Body", "content": text}],
        "annotations": [
            {"tag": "person", "start": 0, "end": 11, "entity": {"type": "person",
                "attributes": {"name": "Luigi", "surname": "Rossi", "birth_date": "1950-02-02", "birth_place": "Roma", "gender": "M"},
                "relationships": [{"rel_name": "FatherOf", "annotation": 1}]}},
            {"tag": "person", "start": 29, "end": 40, "entity": {"type": "person",
                "attributes": {"name": "Mario", "surname": "Rossi", "birth_date": "1980-01-01", "birth_place": "Roma", "gender": "M"}}}
        ],
        "owners": [{"user": "olga", "level": "owner"}, {"user": "gino", "level": "generic"}],
    });
    ok(&dc, "POST", "/ingest", Some(doc)).await;

    let g = ok(&dc, "GET", "/entities/1/graph?as_user=olga&depth=1", None).await;
    let ids: Vec<&str> = g["nodes"].as_array().unwrap().iter().map(|n| n["id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec!["1:1", "1:2", "doc:f1"]);
    assert_eq!(call(&dc, "GET", "/entities/1/graph?as_user=olga&depth=9", None).await.1["error"], json!("invalid_depth"));
    assert_eq!(call(&dc, "GET", "/entities/1/graph?as_user=gino", None).await.0, 403);

    let s = ok(&dc, "GET", "/stats?as_user=gino&type=person&group_by=gender&filter=kind:divorce", None).await;
    assert_eq!(s["groups"], json!({"M": 2}));
    assert_eq!(call(&dc, "GET", "/stats?as_user=gino&type=person&group_by=shoe_size", None).await.1["error"], json!("unknown_attribute"));

    let hits = ok(&dc, "GET", "/documents?as_user=olga&q=father", None).await;
    assert_eq!(hits[0]["doc_id"], json!("f1"));
    assert_eq!(ok(&dc, "GET", "/documents?as_user=stranger&q=father", None).await, json!([]));
    let owner_view = ok(&dc, "GET", "/documents/f1?as_user=olga", None).await;
    assert!(owner_view.to_string().contains("Luigi Rossi"));
    let generic_view = ok(&dc, "GET", "/documents/f1?as_user=gino", None).await;
    assert!(!generic_view.to_string().contains("Luigi"));

    assert_eq!(ok(&dc, "GET", "/fragments/1?as_user=olga", None).await["display_name"], json!("Luigi Rossi"));
    assert_eq!(ok(&dc, "GET", "/fragments/1?as_user=stranger", None).await, Value::Null);

    // A partial identifier waits in the pending queue until someone picks.
    let partial = person_doc("f2", "Rossi", json!({"surname": "Rossi"}), json!([{"user": "olga", "level": "owner"}]));
    ok(&dc, "POST", "/ingest", Some(partial)).await;
    let pending = ok(&dc, "GET", "/pending", None).await;
    assert_eq!(pending.as_array().unwrap().len(), 1);
    let pid = pending[0]["id"].as_u64().unwrap();
    let out = ok(&dc, "POST", &format!("/pending/{pid}/resolution"), Some(json!({"choice": "attach", "local_id": 2}))).await;
    assert_eq!(out["outcome"]["local_id"], json!(2));
    assert_eq!(ok(&dc, "GET", "/pending", None).await, json!([]));

    // Raw documents are annotated by the configured gazetteer.
    let raw = json!({"document": {"doc_id": "r1", "sections": [{"name": "Body", "content": "Il Tribunale applica l'art. 642 c.p."}]},
                     "rule_set": "court", "owners": [{"user": "olga", "level": "owner"}]});
    let r = ok(&dc, "POST", "/ingest/raw", Some(raw)).await;
    let tags: Vec<&str> = r["report"]["annotations"].as_array().unwrap().iter().map(|a| a["tag"].as_str().unwrap()).collect();
    assert_eq!(tags, vec!["court", "law_article"]);
    let (status, body) = call(&dc, "POST", "/ingest/raw", Some(json!({"document": {"doc_id": "r2", "sections": []}, "rule_set": "none"}))).await;
    assert_eq!((status, body["error"].clone()), (404, json!("unknown_rule_set")));
    let (status, body) = call(&dc, "POST", "/ingest", Some(person_doc("f1", "Mario Rossi", mario_a(), json!([])))).await;
    assert_eq!((status, body["error"].clone()), (409, json!("duplicate_document")));

    let export = dc.raw("GET", "/export", None).await.unwrap().1;
    assert!(export.as_str().unwrap().lines().count() >= 4);
    d.stop().await;
    t.stop().await;
}

#[tokio::test(flavor = "multi_thread")]
async fn a_restarted_district_keeps_its_identity_and_state() {
    let dir = tempfile::tempdir().unwrap();
    let t = top(dir.path()).await;
    let d = district(dir.path(), "d1", &t.address, SyncMode::Eager).await;
    let owners = json!([{"user": "olga", "level": "owner"}]);
    ok(&Client::new(&d.address), "POST", "/ingest", Some(person_doc("a", "Mario Rossi", mario_a(), owners))).await;
    d.stop().await;

    let d = district(dir.path(), "d1", &t.address, SyncMode::Eager).await;
    let dc = Client::new(&d.address);
    let h = ok(&dc, "GET", "/health", None).await;
    assert_eq!((h["iid"].clone(), h["entities"].clone(), h["acked"].clone()), (json!(1), json!(1), json!(1)));
    let rows = ok(&Client::new(&t.address), "GET", "/registry/instances", None).await;
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["address"], json!(d.address));
    assert_eq!(ok(&dc, "GET", "/entities/1?as_user=olga", None).await["key"], json!("1:1"));
    d.stop().await;
    t.stop().await;
}
