use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde_json::{json, Value};

use super::client::RemoteError;
use crate::corpus::CorpusError;
use crate::district::DistrictError;
use crate::federation::FederationError;
use crate::ingestion::IngestError;
use crate::query_engine::QueryError;

/// Error body: `{"error": <code>, "message": <text>, ...details}`.
#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
    pub details: Value,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            details: Value::Null,
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }

    pub fn internal(message: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message.to_string())
    }

    fn with(mut self, details: Value) -> Self {
        self.details = details;
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.code, "message": self.message});
        if let Value::Object(extra) = self.details {
            body.as_object_mut().expect("object").extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let msg = e.to_string();
        match e {
            QueryError::PermissionDenied => Self::new(StatusCode::FORBIDDEN, "permission_denied", msg),
            QueryError::UnknownUser(_) => Self::new(StatusCode::FORBIDDEN, "unknown_user", msg),
            QueryError::UnknownEntity(_) => Self::new(StatusCode::NOT_FOUND, "unknown_entity", msg),
            QueryError::UnknownAttribute(_) => Self::new(StatusCode::BAD_REQUEST, "unknown_attribute", msg),
            QueryError::InvalidDepth { .. } => Self::new(StatusCode::BAD_REQUEST, "invalid_depth", msg),
            QueryError::InvalidQuery(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_query", msg),
            QueryError::Remote(_) => Self::new(StatusCode::BAD_GATEWAY, "remote", msg),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        let msg = e.to_string();
        match e {
            IngestError::Corpus(CorpusError::DuplicateDocId(_)) => {
                Self::new(StatusCode::CONFLICT, "duplicate_document", msg)
            }
            IngestError::UnknownRuleSet(_) => Self::new(StatusCode::NOT_FOUND, "unknown_rule_set", msg),
            _ => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "ingest_failed", msg),
        }
    }
}

impl From<FederationError> for ApiError {
    fn from(e: FederationError) -> Self {
        let msg = e.to_string();
        match e {
            FederationError::UnknownParent(_)
            | FederationError::UnknownInstance(_)
            | FederationError::UnknownRequest(_)
            | FederationError::UnknownGlobalEntity(_) => Self::new(StatusCode::NOT_FOUND, "unknown", msg),
            FederationError::SeqGap { expected, got, .. } => {
                Self::new(StatusCode::CONFLICT, "seq_gap", msg).with(json!({"expected": expected, "got": got}))
            }
            FederationError::AlreadyResolved(_) => Self::new(StatusCode::CONFLICT, "already_resolved", msg),
            FederationError::UnauthorizedActor(_) => Self::new(StatusCode::FORBIDDEN, "unauthorized_actor", msg),
            FederationError::InvalidDecision(_) => Self::new(StatusCode::BAD_REQUEST, "invalid_decision", msg),
            FederationError::MetamodelMismatch(_) => Self::new(StatusCode::BAD_REQUEST, "metamodel_mismatch", msg),
            FederationError::ProtocolVersion(_) => Self::new(StatusCode::BAD_REQUEST, "protocol_version", msg),
            FederationError::TopLevelUnreachable(_) => Self::new(StatusCode::BAD_GATEWAY, "unreachable", msg),
            FederationError::Io(_) | FederationError::Wal { .. } => Self::internal(msg),
        }
    }
}

impl From<DistrictError> for ApiError {
    fn from(e: DistrictError) -> Self {
        let msg = e.to_string();
        match e {
            DistrictError::UnknownPending(_) => Self::new(StatusCode::NOT_FOUND, "unknown_pending", msg),
            DistrictError::Register(_) | DistrictError::Corpus(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "rejected", msg)
            }
            DistrictError::State(_) => Self::internal(msg),
        }
    }
}

impl From<RemoteError> for ApiError {
    fn from(e: RemoteError) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "remote", e.to_string())
    }
}
