//! District server: ingestion, local queries, sync with the parent.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Path as UrlPath, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use super::client::{encode, Client, RemoteError};
use super::config::{InstanceConfig, SyncMode};
use super::error::ApiError;
use super::wire::{AddressUpdate, IngestRequest, OwnerGrant, RawIngestRequest, RegisterRequest, SyncMessage};
use super::StartError;
use crate::access_control::{default_rules, render_document, DocumentRendering, PermissionTables, PseudonymScope};
use crate::corpus::{SearchHit, SearchQuery};
use crate::district::{District, PendingChoice, PendingItem};
use crate::federation::{EventOutcome, InstanceRecord, SyncReport, PROTO_VERSION};
use crate::ids::{Iid, LocalId, TOP_LEVEL_IID};
use crate::ingestion::{run_pipeline, Gazetteer, IngestDocument, PipelineOptions, PipelineReport, RuleSet};
use crate::metamodel::Metamodel;
use crate::query_engine::{
    annotation_contexts, district_fragment, get_entity_detail, navigate_graph, query_entity, stat_query, Completeness,
    EntityDetail, EntityGraph, FederatedHit, FederatedSearch, GroupBy, QueryError, QueryResult, StatSpec, StatTable,
};

const STATE_FILE: &str = "district.json";
const IDENTITY_FILE: &str = "instance.json";
const REGISTER_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Serialize, Deserialize)]
struct Identity {
    iid: Iid,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct PushSummary {
    pub pushed: usize,
    pub watermark: u64,
    pub outcomes: Vec<EventOutcome>,
}

pub struct DistrictNode {
    cfg: InstanceConfig,
    iid: Iid,
    state_path: PathBuf,
    district: Mutex<District>,
    gazetteer: Gazetteer,
    parent: Client,
    sync_lock: tokio::sync::Mutex<()>,
    pending_queries: Mutex<BTreeMap<String, Option<Result<QueryResult, (u16, Value)>>>>,
    next_token: AtomicU64,
}

/// Retries `f` until it succeeds or the timeout passes.
async fn retry<T, F, Fut>(what: &str, mut f: F) -> Result<T, StartError>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = Result<T, RemoteError>>,
{
    let deadline = Instant::now() + REGISTER_TIMEOUT;
    loop {
        match f().await {
            Ok(v) => return Ok(v),
            Err(RemoteError::Unreachable { .. }) if Instant::now() < deadline => {
                tokio::time::sleep(Duration::from_millis(200)).await;
            }
            Err(e) => return Err(StartError::Runtime(format!("{what}: {e}"))),
        }
    }
}

fn merge_tables(stored: PermissionTables, file: PermissionTables) -> PermissionTables {
    let mut ownership = stored.ownership;
    for entry in file.ownership {
        ownership.retain(|o| !(o.user == entry.user && o.doc_id == entry.doc_id && o.instance_id == entry.instance_id));
        ownership.push(entry);
    }
    PermissionTables { ownership, ..file }
}

impl DistrictNode {
    pub(super) async fn open(
        cfg: InstanceConfig,
        metamodel: Arc<Metamodel>,
        tables: Option<PermissionTables>,
        gazetteer: Gazetteer,
        address: &str,
    ) -> Result<Arc<Self>, StartError> {
        let parent = Client::new(cfg.parent.clone().expect("validated"));
        let identity_path = cfg.data_dir.join(IDENTITY_FILE);
        let iid = match std::fs::read_to_string(&identity_path) {
            Ok(text) => {
                let id: Identity = serde_json::from_str(&text)
                    .map_err(|e| StartError::Runtime(format!("{}: {e}", identity_path.display())))?;
                let body = AddressUpdate {
                    address: address.to_string(),
                };
                let path = format!("/registry/instances/{}/address", id.iid.0);
                retry("updating address", || parent.post::<_, InstanceRecord>(&path, &body)).await?;
                id.iid
            }
            Err(_) => {
                let body = RegisterRequest {
                    parent_iid: TOP_LEVEL_IID,
                    address: address.to_string(),
                };
                let record: InstanceRecord =
                    retry("registering", || parent.post("/registry/instances", &body)).await?;
                write_atomic(&identity_path, &serde_json::to_vec(&Identity { iid: record.iid }).expect("json"))
                    .map_err(|e| StartError::Runtime(e.to_string()))?;
                record.iid
            }
        };

        let state_path = cfg.data_dir.join(STATE_FILE);
        let district = if state_path.exists() {
            let mut d = District::load(&state_path, metamodel).map_err(|e| StartError::Runtime(e.to_string()))?;
            if d.iid() != iid {
                return Err(StartError::Runtime(format!(
                    "state belongs to instance {}, identity says {}",
                    d.iid(),
                    iid
                )));
            }
            if let Some(t) = tables {
                let merged = merge_tables(d.access().tables(), t);
                d.replace_tables(&merged);
            }
            d
        } else {
            let t = tables.unwrap_or_else(|| PermissionTables {
                rules: default_rules(cfg.privacy),
                ..Default::default()
            });
            District::new(iid, metamodel, &t)
        };
        district.save(&state_path).map_err(|e| StartError::Runtime(e.to_string()))?;
        Ok(Arc::new(Self {
            cfg,
            iid,
            state_path,
            district: Mutex::new(district),
            gazetteer,
            parent,
            sync_lock: tokio::sync::Mutex::new(()),
            pending_queries: Mutex::new(BTreeMap::new()),
            next_token: AtomicU64::new(1),
        }))
    }

    pub fn iid(&self) -> Iid {
        self.iid
    }

    fn save(&self, d: &District) -> Result<(), ApiError> {
        d.save(&self.state_path).map_err(ApiError::internal)
    }

    /// Sends every unacknowledged event upward, in batches.
    pub async fn push(&self) -> Result<PushSummary, ApiError> {
        let _guard = self.sync_lock.lock().await;
        let mut summary = PushSummary {
            watermark: self.district.lock().acked(),
            ..Default::default()
        };
        let mut rewound = false;
        loop {
            let (events, acked) = {
                let d = self.district.lock();
                let events: Vec<_> = d.unacked_events().iter().take(self.cfg.batch_limit).cloned().collect();
                (events, d.acked())
            };
            if events.is_empty() {
                return Ok(summary);
            }
            let msg = SyncMessage {
                proto_version: PROTO_VERSION,
                iid: self.iid,
                events,
            };
            match self.parent.post::<_, SyncReport>("/sync/events", &msg).await {
                Ok(report) => {
                    let mut d = self.district.lock();
                    d.apply_sync_report(&report);
                    self.save(&d)?;
                    if d.acked() <= acked {
                        return Err(ApiError::internal(format!(
                            "parent did not advance the watermark past {acked}"
                        )));
                    }
                    summary.pushed += msg.events.len() - report.duplicates.len();
                    summary.watermark = d.acked();
                    summary.outcomes.extend(report.outcomes);
                }
                Err(e) if !rewound && e.body().and_then(|b| b.get("error")) == Some(&json!("seq_gap")) => {
                    let expected = e.body().and_then(|b| b["expected"].as_u64()).unwrap_or(1);
                    tracing::warn!(expected, acked, "parent is behind; resending");
                    let mut d = self.district.lock();
                    d.rewind_ack(expected.saturating_sub(1));
                    self.save(&d)?;
                    rewound = true;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Eager mode pushes right away; failures are left for the retry loop.
    async fn after_mutation(&self) -> Value {
        if self.cfg.sync_mode != SyncMode::Eager {
            return json!({"status": "deferred"});
        }
        match self.push().await {
            Ok(s) => json!({"status": "pushed", "pushed": s.pushed, "watermark": s.watermark}),
            Err(e) => {
                tracing::warn!("push failed: {}", e.message);
                json!({"status": "failed", "message": e.message})
            }
        }
    }

    fn grant(d: &mut District, doc_id: &str, owners: &[OwnerGrant]) {
        for o in owners {
            d.access_mut().set_ownership(&o.user, doc_id, o.level);
        }
    }

    fn ingest_locked(
        &self,
        doc: &IngestDocument,
        rules: Option<&RuleSet>,
        owners: &[OwnerGrant],
    ) -> Result<PipelineReport, ApiError> {
        let mut d = self.district.lock();
        let report = run_pipeline(&mut d, doc, rules, PipelineOptions::default())?;
        Self::grant(&mut d, &doc.doc_id, owners);
        self.save(&d)?;
        Ok(report)
    }

    async fn federated_hits(
        &self,
        user: &str,
        type_name: &str,
        attrs: &BTreeMap<String, Value>,
        scope: &str,
    ) -> Result<Vec<FederatedHit>, RemoteError> {
        let mut path = format!(
            "/federated/entities?type={}&as_user={}&scope={}",
            encode(type_name),
            encode(user),
            encode(scope)
        );
        for (k, v) in attrs {
            let v = v.as_str().map(str::to_string).unwrap_or_else(|| v.to_string());
            path.push_str(&format!("&{}={}", encode(k), encode(&v)));
        }
        self.parent.get(&path).await
    }

    fn answer(&self, q: &EntityQuery, federated: Vec<FederatedHit>) -> Result<QueryResult, QueryError> {
        let d = self.district.lock();
        let mut scope = PseudonymScope::new(q.scope.clone());
        let fed = Prefetched(federated);
        query_entity(&d, &q.user, &q.type_name, &q.attrs, Some(&fed), &mut scope)
    }
}

struct Prefetched(Vec<FederatedHit>);

impl FederatedSearch for Prefetched {
    fn federated_hits(
        &self,
        _user: &str,
        _type_name: &str,
        _attributes: &BTreeMap<String, Value>,
        _scope_key: &str,
    ) -> Result<Vec<FederatedHit>, QueryError> {
        Ok(self.0.clone())
    }
}

#[derive(Clone)]
struct EntityQuery {
    user: String,
    type_name: String,
    scope: String,
    attrs: BTreeMap<String, Value>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    std::fs::rename(tmp, path)
}

type Node = State<Arc<DistrictNode>>;
type Params = Query<BTreeMap<String, String>>;

fn param<'a>(p: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, ApiError> {
    p.get(key)
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ApiError::bad_request(format!("missing query parameter `{key}`")))
}

fn user_scope(p: &BTreeMap<String, String>) -> Result<(String, PseudonymScope), ApiError> {
    let user = param(p, "as_user")?.to_string();
    let scope = p.get("scope").cloned().unwrap_or_else(|| user.clone());
    Ok((user, PseudonymScope::new(scope)))
}

fn local_id(raw: &str) -> Result<LocalId, ApiError> {
    raw.parse::<u64>()
        .map(LocalId)
        .map_err(|_| ApiError::bad_request(format!("bad entity id `{raw}`")))
}

async fn health(State(n): Node) -> Json<Value> {
    let d = n.district.lock();
    Json(json!({
        "role": "district",
        "iid": n.iid,
        "sync_mode": n.cfg.sync_mode,
        "last_seq": d.register().last_seq(),
        "acked": d.acked(),
        "entities": d.register().len(),
        "documents": d.corpus().documents().count(),
        "pending": d.pending().count(),
        "bound": d.global_bindings().len(),
    }))
}

async fn ingest(State(n): Node, Json(req): Json<IngestRequest>) -> Result<Json<Value>, ApiError> {
    let report = n.ingest_locked(&req.document, None, &req.owners)?;
    let sync = n.after_mutation().await;
    Ok(Json(json!({"report": report, "sync": sync})))
}

async fn ingest_raw(State(n): Node, Json(req): Json<RawIngestRequest>) -> Result<Json<Value>, ApiError> {
    let rules = n.gazetteer.rule_set(&req.rule_set)?;
    let report = n.ingest_locked(&req.document, Some(&rules), &req.owners)?;
    let sync = n.after_mutation().await;
    Ok(Json(json!({"report": report, "sync": sync})))
}

async fn sync_events(State(n): Node, p: Params) -> Result<Json<SyncMessage>, ApiError> {
    let after = match p.get("after") {
        Some(v) => v
            .parse::<u64>()
            .map_err(|_| ApiError::bad_request("`after` must be a sequence number"))?,
        None => n.district.lock().acked(),
    };
    let d = n.district.lock();
    let events = d
        .register()
        .events_after(after)
        .iter()
        .take(n.cfg.batch_limit)
        .cloned()
        .collect();
    Ok(Json(SyncMessage {
        proto_version: PROTO_VERSION,
        iid: n.iid,
        events,
    }))
}

async fn sync_bindings(State(n): Node, Json(report): Json<SyncReport>) -> Result<Json<Value>, ApiError> {
    if report.iid.is_some_and(|i| i != n.iid) {
        return Err(ApiError::bad_request(format!("report is for instance {}", report.iid.unwrap())));
    }
    let mut d = n.district.lock();
    d.apply_sync_report(&report);
    n.save(&d)?;
    Ok(Json(json!({"acked": d.acked(), "bindings": d.global_bindings().len()})))
}

async fn sync_flush(State(n): Node) -> Result<Json<PushSummary>, ApiError> {
    Ok(Json(n.push().await?))
}

async fn pending_list(State(n): Node) -> Json<Vec<PendingItem>> {
    Json(n.district.lock().pending().cloned().collect())
}

async fn pending_resolve(
    State(n): Node,
    UrlPath(id): UrlPath<u64>,
    Json(choice): Json<PendingChoice>,
) -> Result<Json<Value>, ApiError> {
    let outcome = {
        let mut d = n.district.lock();
        let outcome = d.resolve_pending(id, choice)?;
        n.save(&d)?;
        outcome
    };
    let sync = n.after_mutation().await;
    Ok(Json(json!({"outcome": outcome, "sync": sync})))
}

async fn query_entities(State(n): Node, Query(p): Params) -> Result<Json<QueryResult>, ApiError> {
    let user = param(&p, "as_user")?.to_string();
    let q = EntityQuery {
        type_name: param(&p, "type")?.to_string(),
        scope: p.get("scope").cloned().unwrap_or_else(|| user.clone()),
        attrs: p
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "type" | "as_user" | "scope"))
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect(),
        user,
    };
    if !n.district.lock().access().knows_user(&q.user) {
        return Err(QueryError::UnknownUser(q.user).into());
    }
    let federated = match n.federated_hits(&q.user, &q.type_name, &q.attrs, &q.scope).await {
        Ok(h) => h,
        Err(e) => {
            tracing::warn!("federated part unavailable: {e}");
            Vec::new()
        }
    };
    let mut result = n.answer(&q, federated)?;
    let stale = n.cfg.sync_mode == SyncMode::OnQuery || !n.district.lock().unacked_events().is_empty();
    if stale {
        let token = format!("q{}", n.next_token.fetch_add(1, Ordering::Relaxed));
        n.pending_queries.lock().insert(token.clone(), None);
        result.completeness = Completeness::PendingSync { token: token.clone() };
        let node = n.clone();
        tokio::spawn(async move {
            let synced = if node.cfg.sync_mode == SyncMode::OnQuery {
                node.parent
                    .post::<_, Value>("/sync/refresh", &json!({}))
                    .await
                    .map(|_| ())
                    .map_err(ApiError::from)
            } else {
                node.push().await.map(|_| ())
            };
            let outcome = match synced {
                Ok(()) => match node.federated_hits(&q.user, &q.type_name, &q.attrs, &q.scope).await {
                    Ok(f) => node.answer(&q, f).map_err(|e| {
                        let e = ApiError::from(e);
                        (e.status.as_u16(), json!({"error": e.code, "message": e.message}))
                    }),
                    Err(e) => Err((502, json!({"error": "remote", "message": e.to_string()}))),
                },
                Err(e) => Err((e.status.as_u16(), json!({"error": e.code, "message": e.message}))),
            };
            node.pending_queries.lock().insert(token, Some(outcome));
        });
    }
    Ok(Json(result))
}

async fn query_pending(State(n): Node, UrlPath(token): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    match n.pending_queries.lock().get(&token) {
        None => Err(ApiError::not_found(format!("unknown query token `{token}`"))),
        Some(None) => Ok(Json(json!({"completeness": {"status": "pending_sync", "token": token}}))),
        Some(Some(Ok(r))) => Ok(Json(serde_json::to_value(r).expect("json"))),
        Some(Some(Err((status, body)))) => Ok(Json(json!({"failed": status, "body": body}))),
    }
}

async fn entity_detail(State(n): Node, UrlPath(id): UrlPath<String>, Query(p): Params) -> Result<Json<EntityDetail>, ApiError> {
    let (user, mut scope) = user_scope(&p)?;
    let d = n.district.lock();
    if !d.access().knows_user(&user) {
        return Err(QueryError::UnknownUser(user).into());
    }
    Ok(Json(get_entity_detail(&d, &user, local_id(&id)?, &mut scope)?))
}

async fn entity_graph(State(n): Node, UrlPath(id): UrlPath<String>, Query(p): Params) -> Result<Json<EntityGraph>, ApiError> {
    let (user, mut scope) = user_scope(&p)?;
    let depth = match p.get("depth") {
        Some(v) => v.parse::<usize>().map_err(|_| ApiError::bad_request("`depth` must be a number"))?,
        None => 1,
    };
    let d = n.district.lock();
    if !d.access().knows_user(&user) {
        return Err(QueryError::UnknownUser(user).into());
    }
    Ok(Json(navigate_graph(&d, &user, local_id(&id)?, depth, n.cfg.graph, &mut scope)?))
}

/// `filter=kind:divorce,tag:witness` sets metadata filters and the tag.
fn stat_spec(p: &BTreeMap<String, String>) -> Result<StatSpec, ApiError> {
    let group_by = match param(p, "group_by")? {
        "type" => GroupBy::Type,
        attr => GroupBy::Attribute(attr.to_string()),
    };
    let mut spec = StatSpec {
        type_name: p.get("type").cloned(),
        group_by,
        metadata: BTreeMap::new(),
        tag: None,
    };
    for part in p.get("filter").map(String::as_str).unwrap_or("").split(',').filter(|s| !s.is_empty()) {
        let (k, v) = part
            .split_once(':')
            .ok_or_else(|| ApiError::bad_request(format!("filter `{part}` is not key:value")))?;
        if k == "tag" {
            spec.tag = Some(v.to_string());
        } else {
            spec.metadata.insert(k.to_string(), v.to_string());
        }
    }
    Ok(spec)
}

async fn stats(State(n): Node, Query(p): Params) -> Result<Json<StatTable>, ApiError> {
    let user = param(&p, "as_user")?;
    let spec = stat_spec(&p)?;
    let d = n.district.lock();
    Ok(Json(stat_query(&d, user, &spec)?))
}

async fn fragment(State(n): Node, UrlPath(id): UrlPath<String>, Query(p): Params) -> Result<Json<Value>, ApiError> {
    let user = param(&p, "as_user")?;
    let scope = p.get("scope").map(String::as_str).unwrap_or(user);
    let d = n.district.lock();
    let r = district_fragment(&d, local_id(&id)?, user, scope)?;
    Ok(Json(serde_json::to_value(r).expect("json")))
}

async fn document(State(n): Node, UrlPath(id): UrlPath<String>, Query(p): Params) -> Result<Json<DocumentRendering>, ApiError> {
    let (user, mut scope) = user_scope(&p)?;
    let d = n.district.lock();
    let doc = d
        .corpus()
        .document(&id)
        .map_err(|_| ApiError::not_found(format!("unknown document `{id}`")))?;
    let r = render_document(d.access(), &user, doc, &annotation_contexts(&d, &id), &mut scope)
        .map_err(QueryError::from)?;
    Ok(Json(r))
}

/// `GET /documents?as_user=&q=&tag=&entity=&<metadata>=`: hits in documents
/// the user holds any ownership of.
async fn search(State(n): Node, Query(p): Params) -> Result<Json<Vec<SearchHit>>, ApiError> {
    let user = param(&p, "as_user")?;
    let query = SearchQuery {
        text_terms: p.get("q").map(|q| vec![q.clone()]).unwrap_or_default(),
        metadata_filters: p
            .iter()
            .filter(|(k, _)| !matches!(k.as_str(), "as_user" | "q" | "tag" | "entity"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        tag: p.get("tag").cloned(),
        entity_ref: p.get("entity").map(|e| local_id(e)).transpose()?,
    };
    let d = n.district.lock();
    let hits = d.corpus().search(&query).map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(Json(
        hits.into_iter()
            .filter(|h| d.access().ownership(user, &h.doc_id).is_some())
            .collect(),
    ))
}

async fn export(State(n): Node) -> String {
    n.district.lock().register().to_jsonl()
}

pub(super) fn router(node: Arc<DistrictNode>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/ingest", post(ingest))
        .route("/ingest/raw", post(ingest_raw))
        .route("/sync/events", get(sync_events))
        .route("/sync/bindings", post(sync_bindings))
        .route("/sync/flush", post(sync_flush))
        .route("/pending", get(pending_list))
        .route("/pending/{id}/resolution", post(pending_resolve))
        .route("/query/entities", get(query_entities))
        .route("/query/pending/{token}", get(query_pending))
        .route("/entities/{id}", get(entity_detail))
        .route("/entities/{id}/graph", get(entity_graph))
        .route("/stats", get(stats))
        .route("/fragments/{id}", get(fragment))
        .route("/documents", get(search))
        .route("/documents/{id}", get(document))
        .route("/export", get(export))
        .with_state(node)
}

/// Batch mode pushes on a timer; eager mode retries pushes that failed.
pub(super) fn background(node: Arc<DistrictNode>) -> Vec<JoinHandle<()>> {
    let period = match node.cfg.sync_mode {
        SyncMode::Batch { .. } => node.cfg.sync_mode.interval().expect("batch interval"),
        SyncMode::Eager => Duration::from_secs(1),
        SyncMode::OnQuery => return Vec::new(),
    };
    vec![tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        tick.tick().await;
        loop {
            tick.tick().await;
            if node.district.lock().unacked_events().is_empty() {
                continue;
            }
            if let Err(e) = node.push().await {
                tracing::warn!("scheduled push failed: {}", e.message);
            }
        }
    })]
}
