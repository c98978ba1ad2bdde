//! C interface to a single district register.
//!
//! Handles are opaque. Every call returns an [`EregStatus`]; on failure the
//! message is available from [`ereg_last_error`] on the same thread.
//! Structured results come back as NUL-terminated JSON strings owned by the
//! caller and released with [`ereg_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use serde::Serialize;
use serde_json::Value;

use ereg_core::access_control::{default_rules, Ownership, PermissionTables, PrivacyConfig, PseudonymScope};
use ereg_core::corpus::CorpusError;
use ereg_core::district::{District, DistrictError};
use ereg_core::ids::{Iid, LocalId};
use ereg_core::ingestion::{run_pipeline, IngestDocument, IngestError, PipelineOptions};
use ereg_core::metamodel::Metamodel;
use ereg_core::query_engine::{get_entity_detail, navigate_graph, query_entity, stat_query, GraphLimits, QueryError, StatSpec};

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EregStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    InvalidInput = 4,
    NotFound = 5,
    PermissionDenied = 6,
    Conflict = 7,
    Io = 8,
    Panic = 9,
}

/// A district register with its corpus and access rules.
pub struct EregDistrict {
    inner: District,
}

struct Failure(EregStatus, String);

impl Failure {
    fn new(status: EregStatus, m: impl ToString) -> Self {
        Self(status, m.to_string())
    }
}

impl From<QueryError> for Failure {
    fn from(e: QueryError) -> Self {
        let status = match e {
            QueryError::PermissionDenied | QueryError::UnknownUser(_) => EregStatus::PermissionDenied,
            QueryError::UnknownEntity(_) => EregStatus::NotFound,
            _ => EregStatus::InvalidInput,
        };
        Self(status, e.to_string())
    }
}

impl From<IngestError> for Failure {
    fn from(e: IngestError) -> Self {
        let status = match &e {
            IngestError::Corpus(CorpusError::DuplicateDocId(_)) => EregStatus::Conflict,
            IngestError::UnknownRuleSet(_) => EregStatus::NotFound,
            _ => EregStatus::InvalidInput,
        };
        Self(status, e.to_string())
    }
}

impl From<DistrictError> for Failure {
    fn from(e: DistrictError) -> Self {
        Self(EregStatus::Io, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, mapping failures and panics to a status and the last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EregStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EregStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(m);
            EregStatus::Panic
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(EregStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(EregStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// As for [`text`]; null yields `None`.
unsafe fn optional_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

fn parse<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(s).map_err(|e| Failure::new(EregStatus::InvalidJson, format!("{what}: {e}")))
}

/// # Safety
/// `h` is null or a live handle.
unsafe fn handle<'a>(h: *mut EregDistrict) -> Result<&'a mut District, Failure> {
    h.as_mut()
        .map(|d| &mut d.inner)
        .ok_or_else(|| Failure::new(EregStatus::NullArgument, "district handle is null"))
}

/// # Safety
/// `out` is null or writable.
unsafe fn put_json(out: *mut *mut c_char, v: &impl Serialize) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(EregStatus::NullArgument, "output pointer is null"));
    }
    let s = serde_json::to_string(v).map_err(|e| Failure::new(EregStatus::Panic, e))?;
    *out = CString::new(s).expect("JSON has no NUL").into_raw();
    Ok(())
}

unsafe fn put_handle(out: *mut *mut EregDistrict, d: District) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(EregStatus::NullArgument, "output pointer is null"));
    }
    *out = Box::into_raw(Box::new(EregDistrict { inner: d }));
    Ok(())
}

fn metamodel(json: Option<&str>) -> Result<Arc<Metamodel>, Failure> {
    Ok(Arc::new(match json {
        Some(j) => Metamodel::from_json(j).map_err(|e| Failure::new(EregStatus::InvalidInput, e))?,
        None => ereg_core::demo::metamodel(),
    }))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ereg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next call on this thread.
#[no_mangle]
pub extern "C" fn ereg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is null or came from this library and was not freed before.
#[no_mangle]
pub unsafe extern "C" fn ereg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates an empty district. `metamodel_json` and `permissions_json` may
/// be null for the bundled metamodel and the default permission rules.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ereg_district_new(
    iid: u32,
    metamodel_json: *const c_char,
    permissions_json: *const c_char,
    out: *mut *mut EregDistrict,
) -> EregStatus {
    guard(|| {
        let mm = metamodel(optional_text(metamodel_json, "metamodel")?)?;
        let mut tables = match optional_text(permissions_json, "permissions")? {
            Some(p) => PermissionTables::from_json(p).map_err(|e| Failure::new(EregStatus::InvalidInput, e))?,
            None => PermissionTables::default(),
        };
        if tables.rules.is_empty() {
            tables.rules = default_rules(PrivacyConfig::default());
        }
        put_handle(out, District::new(Iid(iid), mm, &tables))
    })
}

/// Opens a district saved with [`ereg_district_save`].
///
/// # Safety
/// As for [`ereg_district_new`].
#[no_mangle]
pub unsafe extern "C" fn ereg_district_load(
    path: *const c_char,
    metamodel_json: *const c_char,
    out: *mut *mut EregDistrict,
) -> EregStatus {
    guard(|| {
        let path = text(path, "path")?;
        let mm = metamodel(optional_text(metamodel_json, "metamodel")?)?;
        put_handle(out, District::load(Path::new(path), mm)?)
    })
}

/// # Safety
/// `h` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ereg_district_save(h: *mut EregDistrict, path: *const c_char) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        d.save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Destroys a handle. Null is ignored.
///
/// # Safety
/// `h` is null or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ereg_district_free(h: *mut EregDistrict) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Gives `user` an ownership level ("owner", "editor", "reader",
/// "generic") on a document.
///
/// # Safety
/// `h` is a live handle; strings are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ereg_district_grant(
    h: *mut EregDistrict,
    user: *const c_char,
    doc_id: *const c_char,
    level: *const c_char,
) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        let level = text(level, "level")?;
        let level: Ownership = serde_json::from_value(Value::String(level.to_ascii_lowercase()))
            .map_err(|_| Failure::new(EregStatus::InvalidInput, format!("unknown ownership level `{level}`")))?;
        d.access_mut()
            .set_ownership(text(user, "user")?, text(doc_id, "doc_id")?, level);
        Ok(())
    })
}

/// Ingests one pre-annotated document given as JSON; the pipeline report
/// is written to `report_json`.
///
/// # Safety
/// `h` is a live handle; `document_json` is NUL-terminated; `report_json`
/// is writable.
#[no_mangle]
pub unsafe extern "C" fn ereg_district_ingest(
    h: *mut EregDistrict,
    document_json: *const c_char,
    report_json: *mut *mut c_char,
) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        let doc: IngestDocument = parse(text(document_json, "document")?, "document")?;
        let report = run_pipeline(d, &doc, None, PipelineOptions::default())?;
        put_json(report_json, &report)
    })
}

/// Renders one entity as `user` sees it.
///
/// # Safety
/// `h` is a live handle; `user` is NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn ereg_district_entity(
    h: *mut EregDistrict,
    user: *const c_char,
    local_id: u64,
    out_json: *mut *mut c_char,
) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        let user = text(user, "user")?;
        let mut scope = PseudonymScope::new(user);
        let detail = get_entity_detail(d, user, LocalId(local_id), &mut scope)?;
        put_json(out_json, &detail)
    })
}

/// Looks up entities of `type_name` matching a JSON object of attribute
/// values.
///
/// # Safety
/// As for [`ereg_district_entity`].
#[no_mangle]
pub unsafe extern "C" fn ereg_district_query(
    h: *mut EregDistrict,
    user: *const c_char,
    type_name: *const c_char,
    attributes_json: *const c_char,
    out_json: *mut *mut c_char,
) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        let user = text(user, "user")?;
        let attrs: BTreeMap<String, Value> = parse(text(attributes_json, "attributes")?, "attributes")?;
        let mut scope = PseudonymScope::new(user);
        let result = query_entity(d, user, text(type_name, "type_name")?, &attrs, None, &mut scope)?;
        put_json(out_json, &result)
    })
}

/// Neighbourhood of an entity up to `depth` hops.
///
/// # Safety
/// As for [`ereg_district_entity`].
#[no_mangle]
pub unsafe extern "C" fn ereg_district_graph(
    h: *mut EregDistrict,
    user: *const c_char,
    local_id: u64,
    depth: u32,
    out_json: *mut *mut c_char,
) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        let user = text(user, "user")?;
        let mut scope = PseudonymScope::new(user);
        let g = navigate_graph(d, user, LocalId(local_id), depth as usize, GraphLimits::default(), &mut scope)?;
        put_json(out_json, &g)
    })
}

/// Aggregate counts, e.g. for `spec_json`
/// `{"type_name":"person","group_by":{"by":"attribute","name":"gender"}}`.
/// `metadata` and `tag` narrow the documents counted.
///
/// # Safety
/// As for [`ereg_district_entity`].
#[no_mangle]
pub unsafe extern "C" fn ereg_district_stats(
    h: *mut EregDistrict,
    user: *const c_char,
    spec_json: *const c_char,
    out_json: *mut *mut c_char,
) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        let spec: StatSpec = parse(text(spec_json, "spec")?, "spec")?;
        put_json(out_json, &stat_query(d, text(user, "user")?, &spec)?)
    })
}

/// The register as JSON lines.
///
/// # Safety
/// `h` is a live handle; `out_jsonl` is writable.
#[no_mangle]
pub unsafe extern "C" fn ereg_district_export(h: *mut EregDistrict, out_jsonl: *mut *mut c_char) -> EregStatus {
    guard(|| {
        let d = handle(h)?;
        if out_jsonl.is_null() {
            return Err(Failure::new(EregStatus::NullArgument, "output pointer is null"));
        }
        *out_jsonl = CString::new(d.register().to_jsonl()).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}
