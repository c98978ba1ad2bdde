//! `ereg`: run and drive entity-register instances. Output is one JSON
//! value per line. Exit status: 0 success, 1 failure, 2 configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ereg_core::district::District;
use ereg_core::metamodel::Metamodel;
use ereg_core::service::scenario::{Runner, Scenario};
use ereg_core::service::{self, Client, ConfigError, InstanceConfig, Role, StartError, SyncMode, CONFIG_FILE};

#[derive(Parser)]
#[command(name = "ereg", version, about = "Federated entity register")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a configuration file into a data directory.
    Init(InitArgs),
    /// Run an instance until interrupted.
    Serve(ServeArgs),
    /// Send documents to a district.
    Ingest(IngestArgs),
    /// Query an instance.
    Query(QueryArgs),
    /// Inspect and settle action requests at the top level.
    Requests {
        #[command(subcommand)]
        command: RequestsCommand,
    },
    /// Run scripted multi-instance scenarios.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
    /// Print a district's entity register as JSON lines.
    Export(ExportArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    role: Role,
    #[arg(long, env = "EREG_DATA_DIR")]
    data_dir: PathBuf,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long, env = "EREG_PARENT")]
    parent: Option<String>,
    #[arg(long)]
    sync_mode: Option<SyncMode>,
    #[arg(long)]
    metamodel: Option<PathBuf>,
    #[arg(long)]
    permissions: Option<PathBuf>,
    #[arg(long)]
    gazetteer: Option<PathBuf>,
    /// Overwrite an existing configuration.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory holding `config.json` and the instance state.
    #[arg(long, env = "EREG_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Configuration file, if not `<data-dir>/config.json`.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Remote {
    /// Base URL of the instance.
    #[arg(long, env = "EREG_URL")]
    url: String,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    remote: Remote,
    /// Annotate with this gazetteer rule set instead of the file's annotations.
    #[arg(long)]
    rule_set: Option<String>,
    /// `user=level`, repeatable; level is owner, editor, reader or generic.
    #[arg(long = "owner")]
    owners: Vec<String>,
    /// Files holding a document or an array of documents.
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[command(flatten)]
    remote: Remote,
    #[arg(long)]
    as_user: String,
    #[command(subcommand)]
    what: QueryCommand,
}

#[derive(Subcommand)]
enum QueryCommand {
    /// Entities of a type matching `--attr name=value` filters.
    Entities {
        #[arg(long = "type")]
        type_name: String,
        #[arg(long = "attr")]
        attrs: Vec<String>,
    },
    /// One entity (local id at a district, global id at the top level).
    Entity { id: String },
    Graph {
        id: String,
        #[arg(long, default_value_t = 1)]
        depth: usize,
    },
    Stats {
        #[arg(long)]
        group_by: String,
        #[arg(long = "type")]
        type_name: Option<String>,
        /// `key:value` pairs separated by commas; `tag:` filters annotations.
        #[arg(long)]
        filter: Option<String>,
    },
    Document { id: String },
    /// The final answer of a query that was waiting for synchronization.
    Pending { token: String },
}

#[derive(Subcommand)]
enum RequestsCommand {
    List {
        #[command(flatten)]
        remote: Remote,
        #[arg(long)]
        status: Option<String>,
    },
    Claim {
        #[command(flatten)]
        remote: Remote,
        id: u64,
        #[arg(long)]
        actor: String,
    },
    Resolve {
        #[command(flatten)]
        remote: Remote,
        id: u64,
        #[arg(long)]
        actor: String,
        /// Decision as JSON, e.g. `{"decision":"merge","global_id":3}`.
        #[arg(long)]
        decision: String,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    Run {
        file: PathBuf,
        /// Where instance data goes; a temporary directory by default.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Print transcript entries with times and addresses masked.
        #[arg(long)]
        normalized: bool,
    },
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, env = "EREG_DATA_DIR")]
    data_dir: PathBuf,
}

/// Failure carrying the exit status it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(m: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: m.to_string(),
        }
    }

    fn runtime(m: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: m.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e)
    }
}

impl From<StartError> for Failure {
    fn from(e: StartError) -> Self {
        match e {
            StartError::Config(c) => Failure::config(c),
            StartError::Runtime(m) => Failure::runtime(m),
        }
    }
}

fn emit(v: &Value) {
    println!("{v}");
}

fn init(a: InitArgs) -> Result<(), Failure> {
    let path = a.data_dir.join(CONFIG_FILE);
    if path.exists() && !a.force {
        return Err(Failure::config(format!("{} exists; use --force to replace it", path.display())));
    }
    std::fs::create_dir_all(&a.data_dir).map_err(Failure::runtime)?;
    let data_dir = std::fs::canonicalize(&a.data_dir).map_err(Failure::runtime)?;
    let mut cfg = InstanceConfig::new(a.role, data_dir);
    cfg.parent = a.parent;
    if let Some(l) = a.listen {
        cfg.listen = l;
    }
    if let Some(m) = a.sync_mode {
        cfg.sync_mode = m;
    }
    let abs = |p: Option<PathBuf>| p.map(|p| std::fs::canonicalize(&p).unwrap_or(p));
    cfg.metamodel = abs(a.metamodel);
    cfg.permissions = abs(a.permissions);
    cfg.gazetteer = abs(a.gazetteer);
    cfg.validate()?;
    cfg.save(&path)?;
    emit(&json!({"event": "initialized", "config": path}));
    Ok(())
}

fn load_config(data_dir: Option<&Path>, config: Option<&Path>) -> Result<InstanceConfig, Failure> {
    let mut cfg = match (config, data_dir) {
        (Some(c), _) => InstanceConfig::load(c)?,
        (None, Some(d)) => InstanceConfig::load(&d.join(CONFIG_FILE))?,
        (None, None) => return Err(Failure::config("give --data-dir or --config")),
    };
    cfg.apply_env(|k| std::env::var(k).ok())?;
    if let (Some(d), Some(_)) = (data_dir, config) {
        cfg.data_dir = d.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

async fn shutdown_signal() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()).expect("signal handler");
        tokio::select! {
            _ = ctrl_c => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = ctrl_c.await;
    }
}

async fn serve(a: ServeArgs) -> Result<(), Failure> {
    let cfg = load_config(a.data_dir.as_deref(), a.config.as_deref())?;
    let mut running = service::start(cfg).await?;
    emit(&json!({"event": "listening", "role": running.role, "address": running.address}));
    tokio::select! {
        _ = shutdown_signal() => running.stop().await,
        _ = running.wait() => return Err(Failure::runtime("server stopped unexpectedly")),
    }
    emit(&json!({"event": "stopped"}));
    Ok(())
}

/// Sends a request and prints the answer; non-2xx answers fail.
async fn call(client: &Client, method: &str, path: &str, body: Option<Value>) -> Result<Value, Failure> {
    let (status, v) = client.raw(method, path, body.as_ref()).await.map_err(Failure::runtime)?;
    if !(200..300).contains(&status) {
        emit(&json!({"status": status, "response": v}));
        return Err(Failure::runtime(format!("{method} {path} answered {status}")));
    }
    Ok(v)
}

fn parse_owner(s: &str) -> Result<Value, Failure> {
    let (user, level) = s
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("owner `{s}` is not user=level")))?;
    Ok(json!({"user": user, "level": level.to_ascii_lowercase()}))
}

async fn ingest(a: IngestArgs) -> Result<(), Failure> {
    let client = Client::new(a.remote.url);
    let owners = a.owners.iter().map(|o| parse_owner(o)).collect::<Result<Vec<_>, _>>()?;
    for file in &a.files {
        let text = std::fs::read_to_string(file).map_err(|e| Failure::config(format!("{}: {e}", file.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", file.display())))?;
        let docs = match v {
            Value::Array(items) => items,
            one => vec![one],
        };
        for doc in docs {
            let (path, body) = match &a.rule_set {
                Some(rs) => ("/ingest/raw", json!({"document": doc, "rule_set": rs, "owners": owners})),
                None => {
                    let mut body = doc;
                    body.as_object_mut()
                        .ok_or_else(|| Failure::config("a document must be a JSON object"))?
                        .insert("owners".into(), json!(owners));
                    ("/ingest", body)
                }
            };
            emit(&call(&client, "POST", path, Some(body)).await?);
        }
    }
    Ok(())
}

fn enc(s: &str) -> String {
    url::form_urlencoded::byte_serialize(s.as_bytes()).collect()
}

async fn query(a: QueryArgs) -> Result<(), Failure> {
    let client = Client::new(a.remote.url);
    let user = enc(&a.as_user);
    let path = match a.what {
        QueryCommand::Entities { type_name, attrs } => {
            let mut p = format!("/query/entities?type={}&as_user={user}", enc(&type_name));
            for kv in attrs {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Failure::config(format!("attribute `{kv}` is not name=value")))?;
                p.push_str(&format!("&{}={}", enc(k), enc(v)));
            }
            p
        }
        QueryCommand::Entity { id } => format!("/entities/{}?as_user={user}", enc(&id)),
        QueryCommand::Graph { id, depth } => format!("/entities/{}/graph?as_user={user}&depth={depth}", enc(&id)),
        QueryCommand::Stats {
            group_by,
            type_name,
            filter,
        } => {
            let mut p = format!("/stats?as_user={user}&group_by={}", enc(&group_by));
            if let Some(t) = type_name {
                p.push_str(&format!("&type={}", enc(&t)));
            }
            if let Some(f) = filter {
                p.push_str(&format!("&filter={}", enc(&f)));
            }
            p
        }
        QueryCommand::Document { id } => format!("/documents/{}?as_user={user}", enc(&id)),
        QueryCommand::Pending { token } => format!("/query/pending/{}", enc(&token)),
    };
    emit(&call(&client, "GET", &path, None).await?);
    Ok(())
}

async fn requests(c: RequestsCommand) -> Result<(), Failure> {
    match c {
        RequestsCommand::List { remote, status } => {
            let client = Client::new(remote.url);
            let path = match status {
                Some(s) => format!("/action-requests?status={}", enc(&s)),
                None => "/action-requests".into(),
            };
            let v = call(&client, "GET", &path, None).await?;
            for r in v.as_array().into_iter().flatten() {
                emit(r);
            }
        }
        RequestsCommand::Claim { remote, id, actor } => {
            let client = Client::new(remote.url);
            let v = call(&client, "POST", &format!("/action-requests/{id}/claim"), Some(json!({"actor": actor}))).await?;
            emit(&v);
        }
        RequestsCommand::Resolve {
            remote,
            id,
            actor,
            decision,
        } => {
            let client = Client::new(remote.url);
            let mut body: Value =
                serde_json::from_str(&decision).map_err(|e| Failure::config(format!("decision: {e}")))?;
            let obj = body
                .as_object_mut()
                .ok_or_else(|| Failure::config("decision must be a JSON object"))?;
            obj.insert("actor".into(), json!(actor));
            obj.insert("proto_version".into(), json!(ereg_core::federation::PROTO_VERSION));
            let v = call(&client, "POST", &format!("/action-requests/{id}/resolution"), Some(body)).await?;
            emit(&v);
        }
    }
    Ok(())
}

async fn scenario(c: ScenarioCommand) -> Result<(), Failure> {
    let ScenarioCommand::Run {
        file,
        work_dir,
        normalized,
    } = c;
    let scenario = Scenario::load(&file).map_err(Failure::config)?;
    let temp;
    let work = match work_dir {
        Some(w) => w,
        None => {
            temp = tempfile::tempdir().map_err(Failure::runtime)?;
            temp.path().to_path_buf()
        }
    };
    let binary = std::env::current_exe().map_err(Failure::runtime)?;
    let mut runner = Runner::new(binary, work);
    let result = runner.run(&scenario).await;
    runner.shutdown().await;
    for entry in runner.transcript() {
        emit(&if normalized { service::scenario::normalize(entry) } else { entry.clone() });
    }
    match result {
        Ok(()) => Ok(()),
        Err(e) if e.is_invalid() => Err(Failure::config(e)),
        Err(e) => Err(Failure::runtime(e)),
    }
}

fn export(a: ExportArgs) -> Result<(), Failure> {
    let cfg = load_config(Some(&a.data_dir), None)?;
    if cfg.role != Role::District {
        return Err(Failure::config("only a district holds a local register"));
    }
    let metamodel = match &cfg.metamodel {
        Some(p) => Metamodel::load(p).map_err(Failure::config)?,
        None => ereg_core::demo::metamodel(),
    };
    let d = District::load(&cfg.data_dir.join("district.json"), Arc::new(metamodel)).map_err(Failure::runtime)?;
    print!("{}", d.register().to_jsonl());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("EREG_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("ereg: {e}");
            return ExitCode::from(1);
        }
    };
    let result = runtime.block_on(async {
        match cli.command {
            Command::Init(a) => init(a),
            Command::Serve(a) => serve(a).await,
            Command::Ingest(a) => ingest(a).await,
            Command::Query(a) => query(a).await,
            Command::Requests { command } => requests(command).await,
            Command::Scenario { command } => scenario(command).await,
            Command::Export(a) => export(a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("ereg: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
