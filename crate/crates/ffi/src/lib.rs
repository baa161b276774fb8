//! C ABI over the simulation engine: load a scenario, run it, read the trace.
//!
//! Every function returns an `NsStatus`; on failure a message is kept per
//! thread and can be copied out with `ns_last_error`. Handles are opaque and
//! must be released with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use netstab::cli::{build_reports, exit_code, write_run};
use netstab::sim::{run_episode, RunStatus, Scenario, ScenarioFile, TraceLog};
use netstab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Unreadable or invalid scenario.
    Load = 3,
    Io = 4,
    /// A consistent parameter set became empty.
    Inconsistent = 5,
    /// Local closed-loop synthesis or identification failed.
    Infeasible = 6,
    OutOfRange = 7,
    BufferTooSmall = 8,
    Internal = 9,
    Panic = 10,
}

/// Validated scenario.
pub struct NsScenario(Arc<Scenario>);

/// Completed (or diverged) episode.
pub struct NsTrace(TraceLog);

/// Which per-step series of a trace to copy.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NsSeries {
    State = 0,
    Input = 1,
    Disturbance = 2,
    Estimate = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> NsStatus {
    match exit_code(e) {
        1 => NsStatus::Io,
        3 => NsStatus::Inconsistent,
        4 => NsStatus::Infeasible,
        2 => match e {
            Error::Io(_) => NsStatus::Io,
            _ => NsStatus::Load,
        },
        _ => NsStatus::Internal,
    }
}

fn fail(status: NsStatus, msg: impl Into<String>) -> NsStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> NsStatus) -> NsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(NsStatus::Panic, msg)
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, NsStatus> {
    if p.is_null() {
        return Err(fail(NsStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(NsStatus::InvalidUtf8, "argument is not UTF-8"))
}

fn emit<T>(out: *mut *mut T, value: T) -> NsStatus {
    // SAFETY: callers check `out` for null before building `value`.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    NsStatus::Ok
}

/// Copies the last error message of this thread, NUL-terminated and truncated
/// to `len` bytes. Returns the full message length (excluding the NUL).
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ns_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ns_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a scenario JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_scenario_from_json(json: *const c_char, out: *mut *mut NsScenario) -> NsStatus {
    guard(|| {
        if out.is_null() {
            return fail(NsStatus::NullPointer, "null output handle");
        }
        let text = match str_arg(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ScenarioFile::from_json(text).and_then(Scenario::from_file) {
            Ok(s) => emit(out, NsScenario(Arc::new(s))),
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Loads and validates a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_scenario_load(path: *const c_char, out: *mut *mut NsScenario) -> NsStatus {
    guard(|| {
        if out.is_null() {
            return fail(NsStatus::NullPointer, "null output handle");
        }
        let path = match str_arg(path) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Scenario::load(Path::new(path)) {
            Ok(s) => emit(out, NsScenario(Arc::new(s))),
            Err(e) => fail(status_of(&e), format!("{path}: {e}")),
        }
    })
}

/// # Safety
/// `scenario` must be null or a handle from `ns_scenario_*`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ns_scenario_free(scenario: *mut NsScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Global state and input dimensions, horizon and final time.
///
/// # Safety
/// `scenario` must be a live handle; every out pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_scenario_dims(
    scenario: *const NsScenario,
    n_x: *mut usize,
    n_u: *mut usize,
    horizon: *mut usize,
    t_final: *mut usize,
) -> NsStatus {
    guard(|| {
        if scenario.is_null() || n_x.is_null() || n_u.is_null() || horizon.is_null() || t_final.is_null() {
            return fail(NsStatus::NullPointer, "null argument");
        }
        let s = &(*scenario).0;
        *n_x = s.topology.n_x();
        *n_u = s.topology.n_u();
        *horizon = s.horizon();
        *t_final = s.t_final();
        NsStatus::Ok
    })
}

/// Runs one episode. Divergence is not an error: query `ns_trace_status`.
///
/// # Safety
/// `scenario` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_run(scenario: *const NsScenario, out: *mut *mut NsTrace) -> NsStatus {
    guard(|| {
        if scenario.is_null() || out.is_null() {
            return fail(NsStatus::NullPointer, "null argument");
        }
        match run_episode((*scenario).0.clone()) {
            Ok(t) => emit(out, NsTrace(t)),
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `trace` must be null or a handle from `ns_run`, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ns_trace_free(trace: *mut NsTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of recorded states (`T + 1` for a completed run).
///
/// # Safety
/// `trace` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_trace_len(trace: *const NsTrace, len: *mut usize) -> NsStatus {
    guard(|| {
        if trace.is_null() || len.is_null() {
            return fail(NsStatus::NullPointer, "null argument");
        }
        *len = (*trace).0.x.len();
        NsStatus::Ok
    })
}

/// `diverged` is set to 1 and `at` to the divergence time if the state blew up.
///
/// # Safety
/// `trace` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_trace_status(trace: *const NsTrace, diverged: *mut i32, at: *mut usize) -> NsStatus {
    guard(|| {
        if trace.is_null() || diverged.is_null() || at.is_null() {
            return fail(NsStatus::NullPointer, "null argument");
        }
        match (*trace).0.status {
            RunStatus::Completed => {
                *diverged = 0;
                *at = 0;
            }
            RunStatus::Diverged { t } => {
                *diverged = 1;
                *at = t;
            }
        }
        NsStatus::Ok
    })
}

/// `sup_t ‖x(t)‖∞` and `sup_t ‖u(t)‖∞`.
///
/// # Safety
/// `trace` must be a live handle; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn ns_trace_sup(trace: *const NsTrace, sup_x: *mut f64, sup_u: *mut f64) -> NsStatus {
    guard(|| {
        if trace.is_null() || sup_x.is_null() || sup_u.is_null() {
            return fail(NsStatus::NullPointer, "null argument");
        }
        *sup_x = (*trace).0.sup_x();
        *sup_u = (*trace).0.sup_u();
        NsStatus::Ok
    })
}

/// Copies one vector of a series at time `t` into `buf`; `written` receives
/// its length. With `buf == NULL` only the length is reported.
///
/// # Safety
/// `trace` must be a live handle; `buf` must be null or hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ns_trace_get(
    trace: *const NsTrace,
    series: NsSeries,
    t: usize,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> NsStatus {
    guard(|| {
        if trace.is_null() || written.is_null() {
            return fail(NsStatus::NullPointer, "null argument");
        }
        let tr = &(*trace).0;
        let rows = match series {
            NsSeries::State => &tr.x,
            NsSeries::Input => &tr.u,
            NsSeries::Disturbance => &tr.w,
            NsSeries::Estimate => &tr.what,
        };
        let Some(v) = rows.get(t) else {
            return fail(NsStatus::OutOfRange, format!("t={t} outside series of length {}", rows.len()));
        };
        *written = v.len();
        if buf.is_null() {
            return NsStatus::Ok;
        }
        if len < v.len() {
            return fail(NsStatus::BufferTooSmall, format!("need {} doubles, got {len}", v.len()));
        }
        std::ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        NsStatus::Ok
    })
}

/// Writes `trace.csv`, `columns.json` and `reports.json` into `dir`.
///
/// # Safety
/// `trace` must be a live handle; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ns_trace_write(trace: *const NsTrace, dir: *const c_char) -> NsStatus {
    guard(|| {
        if trace.is_null() {
            return fail(NsStatus::NullPointer, "null trace");
        }
        let dir = match str_arg(dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        let tr = &(*trace).0;
        match build_reports(tr).and_then(|r| write_run(Path::new(dir), tr, &r)) {
            Ok(()) => NsStatus::Ok,
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}
