use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, Clone)]
pub enum RemoteError {
    #[error("{url} unreachable: {message}")]
    Unreachable { url: String, message: String },
    #[error("{url} answered {status}: {body}")]
    Status { url: String, status: u16, body: Value },
    #[error("{url}: undecodable answer: {message}")]
    Decode { url: String, message: String },
}

impl RemoteError {
    pub fn status(&self) -> Option<u16> {
        match self {
            RemoteError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }

    pub fn body(&self) -> Option<&Value> {
        match self {
            RemoteError::Status { body, .. } => Some(body),
            _ => None,
        }
    }
}

/// JSON-over-HTTP client for one instance.
#[derive(Clone, Debug)]
pub struct Client {
    http: reqwest::Client,
    base: String,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self::with_timeout(base, Duration::from_secs(30))
    }

    pub fn with_timeout(base: impl Into<String>, timeout: Duration) -> Self {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .connect_timeout(Duration::from_secs(5))
            .build()
            .expect("http client");
        Self {
            http,
            base: base.into().trim_end_matches('/').to_string(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    /// Sends a request and returns status and JSON body (`null` if empty
    /// or not JSON), whatever the status.
    pub async fn raw(&self, method: &str, path: &str, body: Option<&Value>) -> Result<(u16, Value), RemoteError> {
        let url = self.url(path);
        let method = reqwest::Method::from_bytes(method.to_ascii_uppercase().as_bytes()).map_err(|e| {
            RemoteError::Decode {
                url: url.clone(),
                message: e.to_string(),
            }
        })?;
        let mut req = self.http.request(method, &url);
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await.map_err(|e| RemoteError::Unreachable {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let bytes = resp.bytes().await.map_err(|e| RemoteError::Unreachable {
            url: url.clone(),
            message: e.to_string(),
        })?;
        let value = serde_json::from_slice(&bytes)
            .unwrap_or_else(|_| if bytes.is_empty() { Value::Null } else { Value::String(String::from_utf8_lossy(&bytes).into_owned()) });
        Ok((status, value))
    }

    async fn call<T: DeserializeOwned>(&self, method: &str, path: &str, body: Option<&Value>) -> Result<T, RemoteError> {
        let (status, value) = self.raw(method, path, body).await?;
        let url = self.url(path);
        if !(200..300).contains(&status) {
            return Err(RemoteError::Status { url, status, body: value });
        }
        serde_json::from_value(value).map_err(|e| RemoteError::Decode {
            url,
            message: e.to_string(),
        })
    }

    pub async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, RemoteError> {
        self.call("GET", path, None).await
    }

    pub async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, RemoteError> {
        let body = serde_json::to_value(body).expect("request body serializes");
        self.call("POST", path, Some(&body)).await
    }
}

/// Percent-encodes a query component.
pub fn encode(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes()).collect()
}
