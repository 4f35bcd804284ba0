//! C ABI over `ubfsim`.
//!
//! Every function returns a [`UbfStatus`]. On failure a message is kept per
//! thread and can be read with [`ubf_last_error`] until the next failing call.
//! Objects come back through out-pointers as opaque handles and must be
//! released with the matching `*_free` function. Strings returned through
//! `char **` are owned by the caller and released with [`ubf_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ubfsim::ident::{encode_response, respond_line, Registry};
use ubfsim::sim::{self, IsolationReport, Scenario, SimError, TraceRecord};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UbfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Scenario JSON could not be parsed.
    Parse = 3,
    /// Scenario parsed but failed validation.
    Invalid = 4,
    Io = 5,
    /// A trace line could not be decoded.
    BadTrace = 6,
    /// The trace was not produced from this scenario.
    TraceMismatch = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// A loaded, validated scenario.
pub struct UbfScenario(Scenario);

/// A simulation trace.
pub struct UbfTrace(Vec<TraceRecord>);

/// The checker's verdict on a trace.
pub struct UbfReport(IsolationReport);

/// State for answering identity queries on behalf of one host.
pub struct UbfRegistry(Registry);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(UbfStatus, String);

impl From<SimError> for Fail {
    fn from(e: SimError) -> Self {
        let status = match e {
            SimError::Invalid { .. } => UbfStatus::Invalid,
            SimError::Parse { .. } => UbfStatus::Parse,
            SimError::Io { .. } => UbfStatus::Io,
            SimError::BadTrace { .. } => UbfStatus::BadTrace,
            SimError::TraceMismatch(_) => UbfStatus::TraceMismatch,
        };
        Fail(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UbfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UbfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal error".into());
            UbfStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(UbfStatus::NullArgument, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(UbfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let c = CString::new(s).map_err(|_| Fail(UbfStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(p))));
    }
}

/// Message for the last failing call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ubf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ubf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn ubf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads and validates a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_scenario_load(path: *const c_char, out: *mut *mut UbfScenario) -> UbfStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put(out, UbfScenario(sim::load_scenario(path)?))
    })
}

/// Parses and validates a scenario from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_scenario_from_json(json: *const c_char, out: *mut *mut UbfScenario) -> UbfStatus {
    guard(|| {
        let json = str_arg(json, "json")?;
        put(out, UbfScenario(Scenario::from_json(json)?))
    })
}

/// Hex SHA-256 digest of the scenario, written to `*out`.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_scenario_digest(scenario: *const UbfScenario, out: *mut *mut c_char) -> UbfStatus {
    guard(|| {
        let s = ref_arg(scenario, "scenario")?;
        put_string(out, s.0.digest().to_owned())
    })
}

/// # Safety
/// `scenario` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ubf_scenario_free(scenario: *mut UbfScenario) {
    free(scenario)
}

/// Runs the scenario with `seed` and returns the trace.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_run(scenario: *const UbfScenario, seed: u64, out: *mut *mut UbfTrace) -> UbfStatus {
    guard(|| {
        let s = ref_arg(scenario, "scenario")?;
        put(out, UbfTrace(sim::run(&s.0, seed)?))
    })
}

/// Number of records in the trace, or 0 for NULL.
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ubf_trace_len(trace: *const UbfTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// The trace as JSON Lines.
///
/// # Safety
/// `trace` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_trace_to_jsonl(trace: *const UbfTrace, out: *mut *mut c_char) -> UbfStatus {
    guard(|| {
        let t = ref_arg(trace, "trace")?;
        let mut buf = vec![];
        sim::write_trace(&t.0, &mut buf).map_err(|e| Fail(UbfStatus::Io, e.to_string()))?;
        put_string(out, String::from_utf8(buf).map_err(|_| Fail(UbfStatus::Internal, "trace not UTF-8".into()))?)
    })
}

/// Parses JSON Lines back into a trace.
///
/// # Safety
/// `jsonl` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_trace_from_jsonl(jsonl: *const c_char, out: *mut *mut UbfTrace) -> UbfStatus {
    guard(|| {
        let text = str_arg(jsonl, "jsonl")?;
        put(out, UbfTrace(sim::parse_trace(text)?))
    })
}

/// # Safety
/// `trace` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ubf_trace_free(trace: *mut UbfTrace) {
    free(trace)
}

/// Audits `trace` against `scenario`.
///
/// # Safety
/// Both handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_check(
    scenario: *const UbfScenario,
    trace: *const UbfTrace,
    out: *mut *mut UbfReport,
) -> UbfStatus {
    guard(|| {
        let s = ref_arg(scenario, "scenario")?;
        let t = ref_arg(trace, "trace")?;
        put(out, UbfReport(sim::check_isolation(&s.0, &t.0)?))
    })
}

/// Number of violations, or 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ubf_report_violations(report: *const UbfReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.violations.len())
}

/// Number of mediated cross-user flows, or 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ubf_report_mediated(report: *const UbfReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.mediated.len())
}

/// The full report as pretty-printed JSON.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_report_to_json(report: *const UbfReport, out: *mut *mut c_char) -> UbfStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        put_string(out, r.0.to_json())
    })
}

/// The report in the CLI's text format.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_report_to_text(report: *const UbfReport, out: *mut *mut c_char) -> UbfStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        put_string(out, r.0.to_text())
    })
}

/// # Safety
/// `report` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ubf_report_free(report: *mut UbfReport) {
    free(report)
}

/// Builds responder state for `host` (NULL for the first host) from a scenario.
///
/// # Safety
/// `scenario` must be a live handle; `host` must be NULL or a NUL-terminated
/// string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_registry_new(
    scenario: *const UbfScenario,
    host: *const c_char,
    out: *mut *mut UbfRegistry,
) -> UbfStatus {
    guard(|| {
        let s = ref_arg(scenario, "scenario")?;
        let host = if host.is_null() { None } else { Some(str_arg(host, "host")?) };
        put(out, UbfRegistry(s.0.registry(host)?))
    })
}

/// Answers one request line (including its trailing newline) and writes the
/// reply line to `*out`. Malformed requests get an `ERR` reply, not a failure status.
///
/// # Safety
/// `registry` must be a live handle; `request` must point to `len` readable
/// bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ubf_registry_respond(
    registry: *const UbfRegistry,
    request: *const u8,
    len: usize,
    out: *mut *mut c_char,
) -> UbfStatus {
    guard(|| {
        let r = ref_arg(registry, "registry")?;
        if request.is_null() && len > 0 {
            return Err(null("request"));
        }
        let bytes = if len == 0 { &[][..] } else { std::slice::from_raw_parts(request, len) };
        let reply = respond_line(&r.0.host, &r.0.directory, bytes);
        let line = encode_response(&reply).unwrap_or_else(|_| b"ERR INVALID\n".to_vec());
        put_string(out, String::from_utf8_lossy(&line).into_owned())
    })
}

/// # Safety
/// `registry` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ubf_registry_free(registry: *mut UbfRegistry) {
    free(registry)
}
