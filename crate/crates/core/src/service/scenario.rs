//! Scenario runner: starts real `ereg serve` processes on loopback, drives
//! them over HTTP and records every response.
//!
//! Strings of the form `${name}` or `${name:/json/pointer}` are replaced by
//! a saved response (or part of it) before a step runs; `last` is the most
//! recent response.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, BufReader};
use tokio::process::{Child, Command};

use super::client::Client;
use super::config::{InstanceConfig, Role, SyncMode, CONFIG_FILE};

#[derive(Debug, Error)]
pub enum ScenarioError {
    /// The scenario itself is malformed.
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("step {step} ({op}) failed: {message}")]
    Step { step: usize, op: String, message: String },
}

impl ScenarioError {
    pub fn is_invalid(&self) -> bool {
        matches!(self, ScenarioError::Invalid(_))
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub steps: Vec<Step>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

fn get() -> String {
    "GET".into()
}

fn default_timeout() -> u64 {
    10_000
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Starts an instance; `parent` names an instance started earlier.
    Start {
        name: String,
        role: Role,
        #[serde(default)]
        parent: Option<String>,
        #[serde(default)]
        sync_mode: Option<SyncMode>,
        /// Inline `permissions.json` content.
        #[serde(default)]
        permissions: Option<Value>,
        /// Inline `gazetteer.json` content.
        #[serde(default)]
        gazetteer: Option<Value>,
        /// Extra configuration fields.
        #[serde(default)]
        config: Option<Value>,
    },
    /// Kills the process outright, as a crash would.
    Kill { instance: String },
    /// Starts a killed instance again on the same address and data.
    Restart { instance: String },
    Ingest {
        instance: String,
        document: Value,
        #[serde(default)]
        owners: Vec<Value>,
        #[serde(default)]
        rule_set: Option<String>,
        #[serde(default)]
        save: Option<String>,
        #[serde(default)]
        expect_status: Option<u16>,
    },
    /// District: push now. Top level: pull from every child.
    Sync { instance: String },
    Http {
        instance: String,
        #[serde(default = "get")]
        method: String,
        path: String,
        #[serde(default)]
        body: Option<Value>,
        #[serde(default)]
        save: Option<String>,
        #[serde(default)]
        expect_status: Option<u16>,
    },
    /// Resolves an action request; without `request`, the oldest open one.
    Resolve {
        instance: String,
        #[serde(default)]
        request: Option<Value>,
        #[serde(default = "master")]
        actor: String,
        decision: Value,
        #[serde(default)]
        save: Option<String>,
        #[serde(default)]
        expect_status: Option<u16>,
    },
    Assert {
        value: String,
        #[serde(default)]
        pointer: String,
        #[serde(default)]
        equals: Option<Value>,
        #[serde(default)]
        len: Option<usize>,
        #[serde(default)]
        exists: Option<bool>,
    },
    /// Polls a GET until the value at `pointer` equals `equals`.
    WaitFor {
        instance: String,
        path: String,
        #[serde(default)]
        pointer: String,
        equals: Value,
        #[serde(default = "default_timeout")]
        timeout_ms: u64,
        #[serde(default)]
        save: Option<String>,
    },
}

fn master() -> String {
    "master".into()
}

impl Step {
    fn op(&self) -> &'static str {
        match self {
            Step::Start { .. } => "start",
            Step::Kill { .. } => "kill",
            Step::Restart { .. } => "restart",
            Step::Ingest { .. } => "ingest",
            Step::Sync { .. } => "sync",
            Step::Http { .. } => "http",
            Step::Resolve { .. } => "resolve",
            Step::Assert { .. } => "assert",
            Step::WaitFor { .. } => "wait_for",
        }
    }
}

/// One recorded step.
pub type Entry = Value;

struct Instance {
    role: Role,
    dir: PathBuf,
    address: String,
    child: Option<Child>,
}

pub struct Runner {
    binary: PathBuf,
    work: PathBuf,
    instances: BTreeMap<String, Instance>,
    vars: BTreeMap<String, Value>,
    transcript: Vec<Entry>,
}

const TIME_KEYS: [&str; 3] = ["at", "created_at", "updated_at"];

/// Replaces values that differ between otherwise identical runs
/// (timestamps, addresses, whole-state digests that cover both) so
/// transcripts can be compared.
pub fn normalize(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(
            m.iter()
                .map(|(k, v)| {
                    let v = if TIME_KEYS.contains(&k.as_str()) {
                        json!("<time>")
                    } else if k == "address" {
                        json!("<address>")
                    } else if k == "state_hash" {
                        json!("<hash>")
                    } else {
                        normalize(v)
                    };
                    (k.clone(), v)
                })
                .collect(),
        ),
        Value::Array(a) => Value::Array(a.iter().map(normalize).collect()),
        other => other.clone(),
    }
}

impl Runner {
    /// `binary` is the `ereg` executable; instance data lives under `work`.
    pub fn new(binary: impl Into<PathBuf>, work: impl Into<PathBuf>) -> Self {
        Self {
            binary: binary.into(),
            work: work.into(),
            instances: BTreeMap::new(),
            vars: BTreeMap::new(),
            transcript: Vec::new(),
        }
    }

    pub fn transcript(&self) -> &[Entry] {
        &self.transcript
    }

    pub fn address(&self, instance: &str) -> Option<&str> {
        self.instances.get(instance).map(|i| i.address.as_str())
    }

    /// Runs every step in order, stopping at the first failure. The
    /// transcript holds everything up to and including the failing step.
    pub async fn run(&mut self, scenario: &Scenario) -> Result<(), ScenarioError> {
        for (i, step) in scenario.steps.iter().enumerate() {
            self.step(i, step).await.map_err(|e| match e {
                StepError::Invalid(m) => ScenarioError::Invalid(format!("step {i}: {m}")),
                StepError::Failed(message) => ScenarioError::Step {
                    step: i,
                    op: step.op().into(),
                    message,
                },
            })?;
        }
        Ok(())
    }

    /// Kills every instance still running.
    pub async fn shutdown(&mut self) {
        for inst in self.instances.values_mut() {
            if let Some(mut c) = inst.child.take() {
                let _ = c.kill().await;
            }
        }
    }

    fn instance(&self, name: &str) -> Result<&Instance, StepError> {
        self.instances
            .get(name)
            .ok_or_else(|| StepError::Invalid(format!("unknown instance `{name}`")))
    }

    fn client(&self, name: &str) -> Result<Client, StepError> {
        Ok(Client::new(self.instance(name)?.address.clone()))
    }

    fn record(&mut self, entry: Value) {
        self.transcript.push(entry);
    }

    fn save(&mut self, name: Option<&String>, value: &Value) {
        self.vars.insert("last".into(), value.clone());
        if let Some(n) = name {
            self.vars.insert(n.clone(), value.clone());
        }
    }

    fn lookup(&self, name: &str, pointer: &str) -> Result<Value, StepError> {
        let v = self
            .vars
            .get(name)
            .ok_or_else(|| StepError::Invalid(format!("nothing saved as `{name}`")))?;
        v.pointer(pointer)
            .cloned()
            .ok_or_else(|| StepError::Failed(format!("`{name}` has nothing at `{pointer}`")))
    }

    fn substitute(&self, v: &Value) -> Result<Value, StepError> {
        let re = Regex::new(r"\$\{([A-Za-z0-9_]+)(?::([^}]*))?\}").expect("template pattern");
        Ok(match v {
            Value::String(s) => {
                if let Some(c) = re.captures(s).filter(|c| c.get(0).unwrap().as_str() == s) {
                    return self.lookup(&c[1], c.get(2).map_or("", |m| m.as_str()));
                }
                let mut out = String::new();
                let mut last = 0;
                for c in re.captures_iter(s) {
                    let m = c.get(0).unwrap();
                    out.push_str(&s[last..m.start()]);
                    match self.lookup(&c[1], c.get(2).map_or("", |m| m.as_str()))? {
                        Value::String(t) => out.push_str(&t),
                        other => out.push_str(&other.to_string()),
                    }
                    last = m.end();
                }
                out.push_str(&s[last..]);
                Value::String(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(|x| self.substitute(x)).collect::<Result<_, _>>()?),
            Value::Object(m) => Value::Object(
                m.iter()
                    .map(|(k, x)| Ok((k.clone(), self.substitute(x)?)))
                    .collect::<Result<_, StepError>>()?,
            ),
            other => other.clone(),
        })
    }

    fn text(&self, s: &str) -> Result<String, StepError> {
        match self.substitute(&Value::String(s.to_string()))? {
            Value::String(t) => Ok(t),
            other => Ok(other.to_string()),
        }
    }

    async fn http(
        &mut self,
        step: usize,
        instance: &str,
        method: &str,
        path: &str,
        body: Option<Value>,
        save: Option<&String>,
        expect: Option<u16>,
    ) -> Result<Value, StepError> {
        let client = self.client(instance)?;
        let (status, response) = client
            .raw(method, path, body.as_ref())
            .await
            .map_err(|e| StepError::Failed(e.to_string()))?;
        self.record(json!({
            "step": step, "op": "http", "instance": instance, "method": method.to_ascii_uppercase(),
            "path": path, "status": status, "response": response,
        }));
        match expect {
            Some(want) if want != status => {
                return Err(StepError::Failed(format!("expected status {want}, got {status}: {response}")));
            }
            None if status >= 400 => return Err(StepError::Failed(format!("status {status}: {response}"))),
            _ => {}
        }
        self.save(save, &response);
        Ok(response)
    }

    async fn spawn(&mut self, name: &str) -> Result<(), StepError> {
        let inst = self.instances.get_mut(name).expect("known instance");
        let mut child = Command::new(&self.binary)
            .arg("serve")
            .arg("--data-dir")
            .arg(&inst.dir)
            .env_remove("EREG_ROLE")
            .env_remove("EREG_PARENT")
            .env_remove("EREG_DATA_DIR")
            .env_remove("EREG_SYNC_MODE")
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| StepError::Invalid(format!("cannot run {}: {e}", self.binary.display())))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let mut lines = BufReader::new(stdout).lines();
        let first = tokio::time::timeout(Duration::from_secs(60), lines.next_line())
            .await
            .map_err(|_| StepError::Failed(format!("`{name}` did not start in time")))?
            .map_err(|e| StepError::Failed(e.to_string()))?
            .ok_or_else(|| StepError::Failed(format!("`{name}` exited during startup")))?;
        let ready: Value = serde_json::from_str(&first).map_err(|e| StepError::Failed(format!("{first}: {e}")))?;
        let address = ready["address"]
            .as_str()
            .ok_or_else(|| StepError::Failed(format!("no address in `{first}`")))?
            .to_string();
        // Keep draining stdout so the child never blocks on a full pipe.
        tokio::spawn(async move { while let Ok(Some(_)) = lines.next_line().await {} });

        // Pin the port so a restart comes back where children expect it.
        let cfg_path = inst.dir.join(CONFIG_FILE);
        let mut cfg = InstanceConfig::load(&cfg_path).map_err(|e| StepError::Failed(e.to_string()))?;
        cfg.listen = address.trim_start_matches("http://").to_string();
        cfg.save(&cfg_path).map_err(|e| StepError::Failed(e.to_string()))?;

        inst.address = address;
        inst.child = Some(child);
        Ok(())
    }

    async fn step(&mut self, i: usize, step: &Step) -> Result<(), StepError> {
        match step {
            Step::Start {
                name,
                role,
                parent,
                sync_mode,
                permissions,
                gazetteer,
                config,
            } => {
                if self.instances.contains_key(name) {
                    return Err(StepError::Invalid(format!("instance `{name}` already exists")));
                }
                let dir = self.work.join(name);
                std::fs::create_dir_all(&dir).map_err(|e| StepError::Invalid(e.to_string()))?;
                let mut cfg = InstanceConfig::new(*role, &dir);
                cfg.parent = match parent {
                    Some(p) => Some(self.instance(p)?.address.clone()),
                    None => None,
                };
                if let Some(m) = sync_mode {
                    cfg.sync_mode = *m;
                }
                let write = |file: &str, v: &Value| -> Result<PathBuf, StepError> {
                    let p = dir.join(file);
                    std::fs::write(&p, serde_json::to_vec_pretty(v).expect("json"))
                        .map_err(|e| StepError::Invalid(e.to_string()))?;
                    Ok(p)
                };
                if let Some(p) = permissions {
                    cfg.permissions = Some(write("permissions.json", p)?);
                }
                if let Some(g) = gazetteer {
                    cfg.gazetteer = Some(write("gazetteer.json", g)?);
                }
                let mut cfg_json = serde_json::to_value(&cfg).expect("json");
                if let Some(Value::Object(extra)) = config {
                    cfg_json.as_object_mut().expect("object").extend(extra.clone());
                }
                let cfg: InstanceConfig =
                    serde_json::from_value(cfg_json).map_err(|e| StepError::Invalid(format!("config: {e}")))?;
                cfg.validate().map_err(|e| StepError::Invalid(e.to_string()))?;
                cfg.save(&dir.join(CONFIG_FILE)).map_err(|e| StepError::Invalid(e.to_string()))?;
                self.instances.insert(
                    name.clone(),
                    Instance {
                        role: *role,
                        dir,
                        address: String::new(),
                        child: None,
                    },
                );
                self.spawn(name).await?;
                let health: Value = self
                    .client(name)?
                    .get("/health")
                    .await
                    .map_err(|e| StepError::Failed(e.to_string()))?;
                self.record(json!({"step": i, "op": "start", "instance": name, "role": role, "iid": health["iid"]}));
                self.save(Some(name), &health);
            }
            Step::Kill { instance } => {
                let inst = self
                    .instances
                    .get_mut(instance)
                    .ok_or_else(|| StepError::Invalid(format!("unknown instance `{instance}`")))?;
                if let Some(mut c) = inst.child.take() {
                    c.kill().await.map_err(|e| StepError::Failed(e.to_string()))?;
                }
                self.record(json!({"step": i, "op": "kill", "instance": instance}));
            }
            Step::Restart { instance } => {
                if self.instance(instance)?.child.is_some() {
                    return Err(StepError::Invalid(format!("`{instance}` is still running")));
                }
                self.spawn(instance).await?;
                self.record(json!({"step": i, "op": "restart", "instance": instance}));
            }
            Step::Ingest {
                instance,
                document,
                owners,
                rule_set,
                save,
                expect_status,
            } => {
                let document = self.substitute(document)?;
                let owners = self.substitute(&Value::Array(owners.clone()))?;
                let (path, body) = match rule_set {
                    Some(rs) => ("/ingest/raw", json!({"document": document, "rule_set": rs, "owners": owners})),
                    None => {
                        let mut body = document;
                        let obj = body
                            .as_object_mut()
                            .ok_or_else(|| StepError::Invalid("document must be an object".into()))?;
                        obj.insert("owners".into(), owners);
                        ("/ingest", body)
                    }
                };
                self.http(i, instance, "POST", path, Some(body), save.as_ref(), *expect_status)
                    .await?;
            }
            Step::Sync { instance } => {
                let path = match self.instance(instance)?.role {
                    Role::District => "/sync/flush",
                    Role::TopLevel => "/sync/refresh",
                };
                self.http(i, instance, "POST", path, Some(json!({})), None, None).await?;
            }
            Step::Http {
                instance,
                method,
                path,
                body,
                save,
                expect_status,
            } => {
                let path = self.text(path)?;
                let body = body.as_ref().map(|b| self.substitute(b)).transpose()?;
                self.http(i, instance, method, &path, body, save.as_ref(), *expect_status)
                    .await?;
            }
            Step::Resolve {
                instance,
                request,
                actor,
                decision,
                save,
                expect_status,
            } => {
                let id = match request {
                    Some(r) => self.substitute(r)?,
                    None => {
                        let open: Value = self
                            .client(instance)?
                            .get("/action-requests?status=open")
                            .await
                            .map_err(|e| StepError::Failed(e.to_string()))?;
                        open.pointer("/0/request_id")
                            .cloned()
                            .ok_or_else(|| StepError::Failed("no open action request".into()))?
                    }
                };
                let id = id
                    .as_u64()
                    .or_else(|| id.as_str().and_then(|s| s.trim_start_matches('R').parse().ok()))
                    .ok_or_else(|| StepError::Invalid(format!("bad request id {id}")))?;
                let mut body = self.substitute(decision)?;
                let obj = body
                    .as_object_mut()
                    .ok_or_else(|| StepError::Invalid("decision must be an object".into()))?;
                obj.insert("actor".into(), json!(actor));
                obj.insert("proto_version".into(), json!(crate::federation::PROTO_VERSION));
                let path = format!("/action-requests/{id}/resolution");
                self.http(i, instance, "POST", &path, Some(body), save.as_ref(), *expect_status)
                    .await?;
            }
            Step::Assert {
                value,
                pointer,
                equals,
                len,
                exists,
            } => {
                let pointer = self.text(pointer)?;
                let found = self
                    .vars
                    .get(value)
                    .ok_or_else(|| StepError::Invalid(format!("nothing saved as `{value}`")))?
                    .pointer(&pointer)
                    .cloned();
                let mut problems = Vec::new();
                if let Some(want) = exists {
                    if found.is_some() != *want {
                        problems.push(format!("`{value}{pointer}` exists: {}", found.is_some()));
                    }
                }
                if let Some(want) = equals {
                    let want = self.substitute(want)?;
                    if found.as_ref() != Some(&want) {
                        problems.push(format!("`{value}{pointer}` is {found:?}, expected {want}"));
                    }
                }
                if let Some(want) = len {
                    let have = match &found {
                        Some(Value::Array(a)) => Some(a.len()),
                        Some(Value::Object(m)) => Some(m.len()),
                        _ => None,
                    };
                    if have != Some(*want) {
                        problems.push(format!("`{value}{pointer}` has length {have:?}, expected {want}"));
                    }
                }
                self.record(json!({"step": i, "op": "assert", "value": value, "pointer": pointer, "ok": problems.is_empty()}));
                if !problems.is_empty() {
                    return Err(StepError::Failed(problems.join("; ")));
                }
            }
            Step::WaitFor {
                instance,
                path,
                pointer,
                equals,
                timeout_ms,
                save,
            } => {
                let path = self.text(path)?;
                let want = self.substitute(equals)?;
                let client = self.client(instance)?;
                let deadline = Instant::now() + Duration::from_millis(*timeout_ms);
                loop {
                    let got = client.raw("GET", &path, None).await;
                    if let Ok((200, v)) = &got {
                        if v.pointer(pointer) == Some(&want) {
                            self.record(json!({"step": i, "op": "wait_for", "instance": instance, "path": path, "response": v}));
                            self.save(save.as_ref(), v);
                            break;
                        }
                    }
                    if Instant::now() >= deadline {
                        return Err(StepError::Failed(format!("timed out; last answer {got:?}")));
                    }
                    tokio::time::sleep(Duration::from_millis(100)).await;
                }
            }
        }
        Ok(())
    }
}

enum StepError {
    Invalid(String),
    Failed(String),
}
