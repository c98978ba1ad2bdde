//! Top-level server: instance registry, global register, action requests.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use super::client::{encode, Client};
use super::config::InstanceConfig;
use super::error::ApiError;
use super::wire::{AddressUpdate, ClaimRequest, RegisterRequest, ResolutionRequest, SyncMessage};
use super::StartError;
use crate::access_control::EntityRendering;
use crate::federation::{
    ActionRequest, FederationError, InstanceRecord, RequestId, RequestStatus, Resolution, SyncReport, TopLevel,
    TopLevelConfig, PROTO_VERSION,
};
use crate::ids::{GlobalId, Iid, NodeRef, TOP_LEVEL_IID};
use crate::metamodel::Metamodel;
use crate::query_engine::{global_matches, FederatedHit, Fragment, QueryError};

const LOG_FILE: &str = "top_level.log";

pub struct TopNode {
    top: Mutex<TopLevel>,
    /// Serializes pulls from children.
    refresh_lock: tokio::sync::Mutex<()>,
}

fn check_proto(v: u32) -> Result<(), ApiError> {
    if v == PROTO_VERSION {
        Ok(())
    } else {
        Err(FederationError::ProtocolVersion(v).into())
    }
}

impl TopNode {
    pub(super) fn open(cfg: InstanceConfig, metamodel: Arc<Metamodel>, address: &str) -> Result<Arc<Self>, StartError> {
        let config = TopLevelConfig {
            address: address.to_string(),
            masters: cfg.masters.iter().cloned().collect(),
            parked_ttl_secs: cfg.parked_ttl_secs,
        };
        let top = TopLevel::open(metamodel, config, &cfg.data_dir.join(LOG_FILE))
            .map_err(|e| StartError::Runtime(e.to_string()))?;
        Ok(Arc::new(Self {
            top: Mutex::new(top),
            refresh_lock: tokio::sync::Mutex::new(()),
        }))
    }

    fn children(&self) -> Vec<InstanceRecord> {
        self.top.lock().directory().children(TOP_LEVEL_IID).cloned().collect()
    }

    fn address_of(&self, iid: Iid) -> Option<String> {
        self.top.lock().directory().get(iid).map(|r| r.address.clone())
    }

    /// Sends each child its current bindings and watermark.
    async fn push_bindings(&self) {
        for child in self.children() {
            let report = {
                let top = self.top.lock();
                SyncReport {
                    iid: Some(child.iid),
                    outcomes: vec![],
                    duplicates: vec![],
                    watermark: top.watermark(child.iid),
                    bindings: top.bindings_for(child.iid),
                }
            };
            if let Err(e) = Client::with_timeout(&child.address, Duration::from_secs(5))
                .post::<_, Value>("/sync/bindings", &report)
                .await
            {
                tracing::warn!(iid = %child.iid, "binding push failed: {e}");
            }
        }
    }

    /// Pulls pending events from every child (on-query mode).
    async fn refresh(&self) -> BTreeMap<String, Value> {
        let _guard = self.refresh_lock.lock().await;
        let mut out = BTreeMap::new();
        for child in self.children() {
            let client = Client::with_timeout(&child.address, Duration::from_secs(10));
            let mut applied = 0usize;
            let status = loop {
                let wm = self.top.lock().watermark(child.iid);
                let msg: SyncMessage = match client.get(&format!("/sync/events?after={wm}")).await {
                    Ok(m) => m,
                    Err(e) => break json!({"status": "unreachable", "message": e.to_string()}),
                };
                if msg.iid != child.iid {
                    break json!({"status": "wrong_instance", "reported": msg.iid});
                }
                if msg.events.is_empty() {
                    break json!({"status": "ok", "applied": applied, "watermark": wm});
                }
                let result = self.top.lock().sync_events(child.iid, &msg.events);
                match result {
                    Ok(report) => {
                        applied += report.outcomes.len();
                        if report.watermark == wm {
                            break json!({"status": "stalled", "watermark": wm});
                        }
                        if let Err(e) = client.post::<_, Value>("/sync/bindings", &report).await {
                            tracing::warn!(iid = %child.iid, "ack failed: {e}");
                        }
                    }
                    Err(e) => break json!({"status": "rejected", "message": e.to_string()}),
                }
            };
            out.insert(child.iid.to_string(), status);
        }
        out
    }

    /// Asks the owning district to render each bound local entity.
    async fn hit(&self, gid: GlobalId, user: &str, scope: &str) -> Result<FederatedHit, ApiError> {
        let (type_name, nodes): (String, Vec<NodeRef>) = {
            let top = self.top.lock();
            let g = top
                .global_entity(gid)
                .ok_or_else(|| QueryError::UnknownEntity(format!("G{}", gid.0)))?;
            (g.type_name.clone(), g.nodes())
        };
        let mut fragments = Vec::new();
        let mut denied = 0;
        for node in nodes {
            let rendering = match self.address_of(node.iid) {
                Some(addr) => {
                    let path = format!(
                        "/fragments/{}?as_user={}&scope={}",
                        node.local_id.0,
                        encode(user),
                        encode(scope)
                    );
                    match Client::with_timeout(addr, Duration::from_secs(10))
                        .get::<Option<EntityRendering>>(&path)
                        .await
                    {
                        Ok(r) => r,
                        Err(e) => {
                            tracing::warn!(node = %node, "fragment unavailable: {e}");
                            None
                        }
                    }
                }
                None => None,
            };
            match rendering {
                Some(rendering) => fragments.push(Fragment {
                    iid: node.iid,
                    local_id: node.local_id,
                    rendering,
                }),
                None => denied += 1,
            }
        }
        Ok(FederatedHit {
            global_id: gid,
            type_name,
            fragments,
            denied,
        })
    }
}

type Node = State<Arc<TopNode>>;
type Params = Query<BTreeMap<String, String>>;

fn param<'a>(p: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, ApiError> {
    p.get(key)
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ApiError::bad_request(format!("missing query parameter `{key}`")))
}

fn global_id(raw: &str) -> Result<GlobalId, ApiError> {
    raw.trim_start_matches('G')
        .parse::<u64>()
        .map(GlobalId)
        .map_err(|_| ApiError::bad_request(format!("bad global id `{raw}`")))
}

async fn health(State(n): Node) -> Json<Value> {
    let top = n.top.lock();
    Json(json!({
        "role": "top_level",
        "iid": TOP_LEVEL_IID,
        "instances": top.directory().len(),
        "global_entities": top.global_entities().count(),
        "open_requests": top.requests(Some(RequestStatus::Open)).len(),
    }))
}

async fn instances(State(n): Node) -> Json<Vec<InstanceRecord>> {
    Json(n.top.lock().directory().records().cloned().collect())
}

async fn register(State(n): Node, Json(req): Json<RegisterRequest>) -> Result<Json<InstanceRecord>, ApiError> {
    let mut top = n.top.lock();
    let iid = top.register_instance(req.parent_iid, &req.address)?;
    Ok(Json(top.directory().get(iid).expect("registered").clone()))
}

async fn update_address(
    State(n): Node,
    UrlPath(iid): UrlPath<u32>,
    Json(req): Json<AddressUpdate>,
) -> Result<Json<InstanceRecord>, ApiError> {
    let mut top = n.top.lock();
    top.update_address(Iid(iid), &req.address)?;
    Ok(Json(top.directory().get(Iid(iid)).expect("known").clone()))
}

async fn sync_events(State(n): Node, Json(msg): Json<SyncMessage>) -> Result<Json<SyncReport>, ApiError> {
    check_proto(msg.proto_version)?;
    Ok(Json(n.top.lock().sync_events(msg.iid, &msg.events)?))
}

async fn refresh(State(n): Node) -> Json<BTreeMap<String, Value>> {
    Json(n.refresh().await)
}

fn parse_status(s: &str) -> Result<RequestStatus, ApiError> {
    match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "open" => Ok(RequestStatus::Open),
        "inprogress" => Ok(RequestStatus::InProgress),
        "resolved" => Ok(RequestStatus::Resolved),
        "rejected" => Ok(RequestStatus::Rejected),
        _ => Err(ApiError::bad_request(format!("unknown request status `{s}`"))),
    }
}

async fn requests(State(n): Node, Query(p): Params) -> Result<Json<Vec<ActionRequest>>, ApiError> {
    let status = p.get("status").map(|s| parse_status(s)).transpose()?;
    Ok(Json(n.top.lock().requests(status).into_iter().cloned().collect()))
}

async fn request(State(n): Node, UrlPath(id): UrlPath<u64>) -> Result<Json<ActionRequest>, ApiError> {
    let top = n.top.lock();
    let r = top.request(RequestId(id)).ok_or(FederationError::UnknownRequest(id))?;
    Ok(Json(r.clone()))
}

async fn claim(
    State(n): Node,
    UrlPath(id): UrlPath<u64>,
    Json(req): Json<ClaimRequest>,
) -> Result<Json<ActionRequest>, ApiError> {
    let mut top = n.top.lock();
    top.claim_request(RequestId(id), &req.actor)?;
    Ok(Json(top.request(RequestId(id)).expect("claimed").clone()))
}

async fn resolve(
    State(n): Node,
    UrlPath(id): UrlPath<u64>,
    Json(req): Json<ResolutionRequest>,
) -> Result<Json<Resolution>, ApiError> {
    check_proto(req.proto_version)?;
    let resolution = n.top.lock().resolve_action_request(RequestId(id), &req.decision, &req.actor)?;
    n.push_bindings().await;
    Ok(Json(resolution))
}

async fn bindings(State(n): Node, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let gid = global_id(&id)?;
    let nodes = n.top.lock().map_global_local(gid)?;
    let bindings: Vec<[u64; 2]> = nodes.iter().map(|(i, l)| [i.0 as u64, l.0]).collect();
    Ok(Json(json!({"global_id": gid, "bindings": bindings})))
}

/// Administrative view of a global entity, attributes included.
async fn global_record(State(n): Node, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let gid = global_id(&id)?;
    let top = n.top.lock();
    let g = top.global_entity(gid).ok_or(FederationError::UnknownGlobalEntity(gid))?;
    Ok(Json(serde_json::to_value(g).expect("json")))
}

async fn global_entity(State(n): Node, UrlPath(id): UrlPath<String>, Query(p): Params) -> Result<Json<FederatedHit>, ApiError> {
    let user = param(&p, "as_user")?;
    let scope = p.get("scope").map(String::as_str).unwrap_or(user);
    let hit = n.hit(global_id(&id)?, user, scope).await?;
    if hit.fragments.is_empty() && hit.denied > 0 {
        return Err(QueryError::PermissionDenied.into());
    }
    Ok(Json(hit))
}

async fn federated_entities(State(n): Node, Query(p): Params) -> Result<Json<Vec<FederatedHit>>, ApiError> {
    let user = param(&p, "as_user")?;
    let type_name = param(&p, "type")?;
    let scope = p.get("scope").map(String::as_str).unwrap_or(user);
    let raw: BTreeMap<String, Value> = p
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "type" | "as_user" | "scope"))
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    let gids = {
        let top = n.top.lock();
        let partial = top
            .metamodel()
            .validate_attributes(type_name, &raw)
            .map_err(QueryError::from)?;
        global_matches(&top, type_name, &partial)
    };
    let mut hits = Vec::new();
    for g in gids {
        hits.push(n.hit(g, user, scope).await?);
    }
    Ok(Json(hits))
}

async fn audit(State(n): Node) -> Json<Value> {
    let top = n.top.lock();
    let watermark_errors = top.audit_watermarks().err().unwrap_or_default();
    let binding_errors = top.audit_bindings();
    let watermarks: BTreeMap<String, u64> = top
        .directory()
        .records()
        .filter(|r| r.iid != TOP_LEVEL_IID)
        .map(|r| (r.iid.to_string(), top.watermark(r.iid)))
        .collect();
    Json(json!({
        "ok": watermark_errors.is_empty() && binding_errors.is_empty(),
        "watermark_errors": watermark_errors,
        "binding_errors": binding_errors,
        "watermarks": watermarks,
        "state_hash": top.state_hash(),
    }))
}

/// Administrative dump of the canonical global state.
async fn state(State(n): Node) -> Json<Value> {
    let top = n.top.lock();
    Json(json!({"hash": top.state_hash(), "canonical": top.canonical()}))
}

async fn expire(State(n): Node) -> Result<Json<Value>, ApiError> {
    let expired = n.top.lock().expire_parked()?;
    Ok(Json(json!({"expired": expired})))
}

pub(super) fn router(node: Arc<TopNode>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/registry/instances", get(instances).post(register))
        .route("/registry/instances/{iid}/address", post(update_address))
        .route("/sync/events", post(sync_events))
        .route("/sync/refresh", post(refresh))
        .route("/action-requests", get(requests))
        .route("/action-requests/{id}", get(request))
        .route("/action-requests/{id}/claim", post(claim))
        .route("/action-requests/{id}/resolution", post(resolve))
        .route("/entities/global/{id}", get(global_record))
        .route("/entities/global/{id}/bindings", get(bindings))
        .route("/entities/{id}", get(global_entity))
        .route("/federated/entities", get(federated_entities))
        .route("/audit", get(audit))
        .route("/state", get(state))
        .route("/parked/expire", post(expire))
        .with_state(node)
}

/// Periodically turns over-age parked relationships into requests.
pub(super) fn background(node: Arc<TopNode>) -> Vec<JoinHandle<()>> {
    vec![tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            if let Err(e) = node.top.lock().expire_parked() {
                tracing::warn!("parked expiry failed: {e}");
            }
        }
    })]
}
