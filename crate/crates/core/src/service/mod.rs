//! HTTP service: district and top-level servers, their client and the
//! scenario runner used by the CLI.

mod client;
pub mod config;
mod district_node;
mod error;
pub mod scenario;
mod top_node;
pub mod wire;

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub use client::{Client, RemoteError};
pub use config::{ConfigError, InstanceConfig, Role, SyncMode, CONFIG_FILE};
pub use district_node::DistrictNode;
pub use error::ApiError;
pub use top_node::TopNode;

use crate::access_control::{default_rules, PermissionTables};
use crate::demo;
use crate::ingestion::Gazetteer;
use crate::metamodel::Metamodel;

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl StartError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        StartError::Runtime(e.to_string())
    }
}

/// A server running inside the current process.
pub struct RunningInstance {
    pub address: String,
    pub role: Role,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<()>,
}

impl RunningInstance {
    pub async fn stop(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.task).await;
    }

    /// Resolves when the server stops on its own.
    pub async fn wait(&mut self) {
        let _ = (&mut self.task).await;
    }

    pub fn trigger_shutdown(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

fn load_metamodel(cfg: &InstanceConfig) -> Result<Metamodel, StartError> {
    match &cfg.metamodel {
        Some(p) => Metamodel::load(p).map_err(|e| ConfigError::Invalid(format!("metamodel: {e}")).into()),
        None => Ok(demo::metamodel()),
    }
}

fn load_tables(cfg: &InstanceConfig) -> Result<Option<PermissionTables>, StartError> {
    let Some(p) = &cfg.permissions else { return Ok(None) };
    let mut t = PermissionTables::load(p).map_err(|e| ConfigError::Invalid(format!("permissions: {e}")))?;
    if t.rules.is_empty() {
        t.rules = default_rules(cfg.privacy);
    }
    Ok(Some(t))
}

fn load_gazetteer(cfg: &InstanceConfig) -> Result<Gazetteer, StartError> {
    match &cfg.gazetteer {
        Some(p) => Gazetteer::load(p).map_err(|e| ConfigError::Invalid(format!("gazetteer: {e}")).into()),
        None => Ok(Gazetteer::default()),
    }
}

/// Binds the listener, opens or creates the instance state and starts
/// serving. Districts register with their parent first.
pub async fn start(cfg: InstanceConfig) -> Result<RunningInstance, StartError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.data_dir).map_err(StartError::runtime)?;
    let metamodel = Arc::new(load_metamodel(&cfg)?);
    let tables = load_tables(&cfg)?;
    let gazetteer = load_gazetteer(&cfg)?;

    let listener = TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| StartError::Runtime(format!("cannot listen on {}: {e}", cfg.listen)))?;
    let local: SocketAddr = listener.local_addr().map_err(StartError::runtime)?;
    let address = format!("http://{local}");
    let role = cfg.role;

    let (router, background) = match role {
        Role::TopLevel => {
            let node = TopNode::open(cfg, metamodel, &address)?;
            (top_node::router(node.clone()), top_node::background(node))
        }
        Role::District => {
            let node = DistrictNode::open(cfg, metamodel, tables, gazetteer, &address).await?;
            (district_node::router(node.clone()), district_node::background(node))
        }
    };

    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        let served = axum::serve(listener, router).with_graceful_shutdown(async move {
            let _ = rx.await;
        });
        if let Err(e) = served.await {
            tracing::error!("server stopped: {e}");
        }
        for b in background {
            b.abort();
        }
    });
    tracing::info!(%address, %role, "listening");
    Ok(RunningInstance {
        address,
        role,
        shutdown: Some(tx),
        task,
    })
}

/// Reads `config.json` from a data directory, applying environment
/// overrides.
pub fn config_from_data_dir(dir: &Path) -> Result<InstanceConfig, ConfigError> {
    let mut cfg = InstanceConfig::load(&dir.join(CONFIG_FILE))?;
    cfg.apply_env(|k| std::env::var(k).ok())?;
    Ok(cfg)
}
