//! Instance configuration: a JSON file in the data directory, overridable
//! from the environment.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::access_control::PrivacyConfig;
use crate::query_engine::GraphLimits;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    District,
    TopLevel,
}

impl FromStr for Role {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "district" => Ok(Role::District),
            "top_level" | "top" => Ok(Role::TopLevel),
            other => Err(ConfigError::Invalid(format!("unknown role `{other}`"))),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::District => "district",
            Role::TopLevel => "top_level",
        })
    }
}

/// When a district pushes its events upward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SyncMode {
    /// After every mutation.
    Eager,
    /// Every `interval`.
    Batch { interval_ms: u64 },
    /// When the parent asks, typically because a query needs fresh data.
    OnQuery,
}

impl SyncMode {
    pub fn interval(&self) -> Option<Duration> {
        match self {
            SyncMode::Batch { interval_ms } => Some(Duration::from_millis(*interval_ms)),
            _ => None,
        }
    }
}

impl FromStr for SyncMode {
    type Err = ConfigError;

    /// `eager`, `on_query`, `batch` (5 s), `batch:<seconds>` or
    /// `batch:<n>ms`; `batch(<seconds>)` is accepted too.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase().replace('-', "_");
        let bad = || ConfigError::Invalid(format!("unknown sync mode `{s}`"));
        match s.as_str() {
            "eager" => return Ok(SyncMode::Eager),
            "on_query" => return Ok(SyncMode::OnQuery),
            "batch" => return Ok(SyncMode::Batch { interval_ms: 5_000 }),
            _ => {}
        }
        let arg = s
            .strip_prefix("batch:")
            .or_else(|| s.strip_prefix("batch(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(bad)?
            .trim();
        let interval_ms = match arg.strip_suffix("ms") {
            Some(ms) => ms.trim().parse::<u64>().map_err(|_| bad())?,
            None => {
                let secs = arg.strip_suffix('s').unwrap_or(arg).parse::<f64>().map_err(|_| bad())?;
                if !secs.is_finite() || secs < 0.0 {
                    return Err(bad());
                }
                (secs * 1000.0).round() as u64
            }
        };
        if interval_ms == 0 {
            return Err(ConfigError::Invalid("batch interval must be positive".into()));
        }
        Ok(SyncMode::Batch { interval_ms })
    }
}

impl fmt::Display for SyncMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SyncMode::Eager => f.write_str("eager"),
            SyncMode::OnQuery => f.write_str("on_query"),
            SyncMode::Batch { interval_ms } => write!(f, "batch:{interval_ms}ms"),
        }
    }
}

impl TryFrom<String> for SyncMode {
    type Error = ConfigError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SyncMode> for String {
    fn from(m: SyncMode) -> Self {
        m.to_string()
    }
}

fn default_listen() -> String {
    "127.0.0.1:0".into()
}

fn default_sync_mode() -> SyncMode {
    SyncMode::Eager
}

fn default_masters() -> Vec<String> {
    vec!["master".into()]
}

fn default_parked_ttl() -> i64 {
    86_400
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceConfig {
    pub role: Role,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Base URL of the parent instance; districts only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default = "default_sync_mode")]
    pub sync_mode: SyncMode,
    pub data_dir: PathBuf,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub graph: GraphLimits,
    /// Metamodel file; the bundled one when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metamodel: Option<PathBuf>,
    /// Permission tables; default rules and no ownership when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permissions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gazetteer: Option<PathBuf>,
    /// Top level: users allowed to resolve action requests.
    #[serde(default = "default_masters")]
    pub masters: Vec<String>,
    #[serde(default = "default_parked_ttl")]
    pub parked_ttl_secs: i64,
    /// Events per sync message.
    #[serde(default = "default_batch_limit")]
    pub batch_limit: usize,
}

fn default_batch_limit() -> usize {
    500
}

impl InstanceConfig {
    pub fn new(role: Role, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            role,
            listen: default_listen(),
            parent: None,
            sync_mode: default_sync_mode(),
            data_dir: data_dir.into(),
            privacy: PrivacyConfig::default(),
            graph: GraphLimits::default(),
            metamodel: None,
            permissions: None,
            gazetteer: None,
            masters: default_masters(),
            parked_ttl_secs: default_parked_ttl(),
            batch_limit: default_batch_limit(),
        }
    }

    /// Reads `path`; relative file paths inside are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg: InstanceConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let absolutize = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        absolutize(&mut cfg.data_dir);
        for p in [&mut cfg.metamodel, &mut cfg.permissions, &mut cfg.gazetteer].into_iter().flatten() {
            absolutize(p);
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text + "\n").map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Applies `EREG_ROLE`, `EREG_PARENT`, `EREG_DATA_DIR` and
    /// `EREG_SYNC_MODE`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var("EREG_ROLE") {
            self.role = v.parse()?;
        }
        if let Some(v) = var("EREG_PARENT") {
            self.parent = (!v.trim().is_empty()).then(|| v.trim().to_string());
        }
        if let Some(v) = var("EREG_DATA_DIR") {
            self.data_dir = PathBuf::from(v);
        }
        if let Some(v) = var("EREG_SYNC_MODE") {
            self.sync_mode = v.parse()?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match (self.role, &self.parent) {
            (Role::District, None) => return Err(ConfigError::Invalid("a district needs a parent".into())),
            (Role::TopLevel, Some(_)) => {
                return Err(ConfigError::Invalid("the top level has no parent".into()));
            }
            _ => {}
        }
        if self.graph.max_depth == 0 || self.graph.max_nodes == 0 {
            return Err(ConfigError::Invalid("graph limits must be positive".into()));
        }
        if self.privacy.reader_threshold > self.privacy.max_level {
            return Err(ConfigError::Invalid("reader threshold above the highest privacy level".into()));
        }
        if self.batch_limit == 0 {
            return Err(ConfigError::Invalid("batch_limit must be positive".into()));
        }
        Ok(())
    }
}
