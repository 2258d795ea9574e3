//! C ABI for `rtopt`.
//!
//! Objects cross the boundary as opaque handles created by
//! `rtopt_scenario_from_*` and `rtopt_run` and released by the matching
//! `*_free`. Every fallible call
//! returns an [`RtoptStatus`]; on failure a message is stored per thread and
//! can be read with [`rtopt_last_error_message`]. Strings returned through
//! out-parameters are owned by the caller and released with
//! [`rtopt_string_free`]. No function unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rtopt::run::{execute, run_to_dir, RunResult};
use rtopt::scenario::Scenario;
use rtopt::sco::Mode;
use rtopt::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RtoptStatus {
    Ok = 0,
    /// A required pointer was null or a string was not UTF-8.
    NullOrInvalidArgument = 1,
    /// The scenario or an override failed validation.
    Validation = 2,
    /// The optimizer or a conic subproblem failed.
    Solver = 3,
    /// Reading or writing files failed.
    Io = 4,
    /// An index was outside the valid range.
    OutOfRange = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// A parsed, validated scenario.
pub struct RtoptScenario {
    inner: Scenario,
}

/// The in-memory result of a pipeline run.
pub struct RtoptRun {
    inner: RunResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> RtoptStatus {
    match e {
        Error::Validation(_) | Error::Json(_) => RtoptStatus::Validation,
        Error::InvalidArgument(_) => RtoptStatus::NullOrInvalidArgument,
        Error::Io(_) => RtoptStatus::Io,
        Error::Domain { .. } | Error::InnerSolver { .. } | Error::Solve { .. } => RtoptStatus::Solver,
    }
}

struct Fail(RtoptStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(RtoptStatus::NullOrInvalidArgument, msg.to_string())
}

/// Run `f`, translating errors and panics into a status plus message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RtoptStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RtoptStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RtoptStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn put<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(v);
    Ok(())
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rtopt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn rtopt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string obtained from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rtopt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parse and validate a scenario from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_from_json(json: *const c_char, out: *mut *mut RtoptScenario) -> RtoptStatus {
    guard(|| {
        let text = str_arg(json, "json")?;
        let scn = Scenario::from_json(text)?;
        put(out, Box::into_raw(Box::new(RtoptScenario { inner: scn })))
    })
}

/// Parse and validate a scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_from_file(path: *const c_char, out: *mut *mut RtoptScenario) -> RtoptStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let scn = Scenario::from_path(Path::new(p))?;
        put(out, Box::into_raw(Box::new(RtoptScenario { inner: scn })))
    })
}

/// Release a scenario. Null is ignored.
///
/// # Safety
/// `s` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_free(s: *mut RtoptScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// The scenario as pretty JSON with every default filled in.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_to_json(s: *const RtoptScenario, out: *mut *mut c_char) -> RtoptStatus {
    guard(|| {
        let s = ref_arg(s, "scenario")?;
        put(out, c_string(s.inner.to_json()))
    })
}

/// Apply an override and re-validate; the scenario is unchanged on failure.
unsafe fn modify(s: *mut RtoptScenario, f: impl FnOnce(&mut Scenario) -> Result<(), Fail>) -> RtoptStatus {
    guard(|| {
        let s = mut_arg(s, "scenario")?;
        let mut next = s.inner.clone();
        f(&mut next)?;
        next.validate()?;
        s.inner = next;
        Ok(())
    })
}

/// Set the mode: "nto", "nrto" or "nrto-le".
///
/// # Safety
/// `s` must be a live scenario handle; `mode` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_set_mode(s: *mut RtoptScenario, mode: *const c_char) -> RtoptStatus {
    modify(s, |scn| {
        let m: Mode = str_arg(mode, "mode")?.parse().map_err(|e: Error| Fail(RtoptStatus::Validation, e.to_string()))?;
        scn.mode = m;
        Ok(())
    })
}

/// Set the number of validation rollouts.
///
/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_set_samples(s: *mut RtoptScenario, samples: usize) -> RtoptStatus {
    modify(s, |scn| {
        scn.samples = samples;
        Ok(())
    })
}

/// Set the master seed of the Monte-Carlo draws.
///
/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_set_seed(s: *mut RtoptScenario, seed: u64) -> RtoptStatus {
    modify(s, |scn| {
        scn.seed = seed;
        Ok(())
    })
}

/// Set the uncertainty level.
///
/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn rtopt_scenario_set_tau(s: *mut RtoptScenario, tau: f64) -> RtoptStatus {
    modify(s, |scn| {
        scn.uncertainty.tau = tau;
        Ok(())
    })
}

/// Solve and validate the scenario in memory.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run(s: *const RtoptScenario, out: *mut *mut RtoptRun) -> RtoptStatus {
    guard(|| {
        let s = ref_arg(s, "scenario")?;
        let res = execute(&s.inner, false)?;
        put(out, Box::into_raw(Box::new(RtoptRun { inner: res })))
    })
}

/// Solve, validate and write all artifacts into `out_dir`, like `rtopt run`.
/// Sweeps are not supported here.
///
/// # Safety
/// `s` must be a live scenario handle; `out_dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_to_dir(s: *const RtoptScenario, out_dir: *const c_char) -> RtoptStatus {
    guard(|| {
        let s = ref_arg(s, "scenario")?;
        let dir = str_arg(out_dir, "out_dir")?;
        run_to_dir(&s.inner, Path::new(dir), false)?;
        Ok(())
    })
}

/// Release a run. Null is ignored.
///
/// # Safety
/// `r` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_free(r: *mut RtoptRun) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Final constraint-satisfaction fraction in [0, 1].
///
/// # Safety
/// `r` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_satisfaction(r: *const RtoptRun, out: *mut f64) -> RtoptStatus {
    guard(|| {
        let r = ref_arg(r, "run")?;
        put(out, r.inner.final_phase().report.fraction)
    })
}

/// Whether the final solve met its convergence test (1) or hit the cap (0).
///
/// # Safety
/// `r` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_converged(r: *const RtoptRun, out: *mut i32) -> RtoptStatus {
    guard(|| {
        let r = ref_arg(r, "run")?;
        put(out, i32::from(r.inner.final_phase().solve.converged()))
    })
}

/// Horizon `T`, state and control dimensions of the run's policy.
///
/// # Safety
/// `r` must be a live run handle; the three outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_dims(r: *const RtoptRun, horizon: *mut usize, n_x: *mut usize, n_u: *mut usize) -> RtoptStatus {
    guard(|| {
        let r = ref_arg(r, "run")?;
        let p = &r.inner.final_phase().solve.policy;
        put(horizon, p.horizon())?;
        put(n_x, p.nominal.states[0].len())?;
        put(n_u, p.u_bar[0].len())
    })
}

/// Copy the nominal control `u_bar_k` into `buf` (length `n_u`).
///
/// # Safety
/// `r` must be a live run handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_nominal_control(r: *const RtoptRun, k: usize, buf: *mut f64, len: usize) -> RtoptStatus {
    guard(|| {
        let r = ref_arg(r, "run")?;
        let p = &r.inner.final_phase().solve.policy;
        let u = p.u_bar.get(k).ok_or_else(|| Fail(RtoptStatus::OutOfRange, format!("k = {k} outside 0..{}", p.horizon())))?;
        copy_out(u.as_slice(), buf, len)
    })
}

/// Copy the gain `K_k` into `buf` in row-major order (length `n_u * n_x`).
///
/// # Safety
/// `r` must be a live run handle; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_gain(r: *const RtoptRun, k: usize, buf: *mut f64, len: usize) -> RtoptStatus {
    guard(|| {
        let r = ref_arg(r, "run")?;
        let p = &r.inner.final_phase().solve.policy;
        let g = p.gains.blocks.get(k).ok_or_else(|| Fail(RtoptStatus::OutOfRange, format!("k = {k} outside 0..{}", p.horizon())))?;
        let row_major: Vec<f64> = (0..g.nrows()).flat_map(|i| (0..g.ncols()).map(move |j| g[(i, j)])).collect();
        copy_out(&row_major, buf, len)
    })
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), Fail> {
    if buf.is_null() {
        return Err(invalid("buffer is null"));
    }
    if len != src.len() {
        return Err(Fail(RtoptStatus::OutOfRange, format!("buffer holds {len} values, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, len);
    Ok(())
}

/// The run's statistics as the JSON written to `stats.json`.
///
/// # Safety
/// `r` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_stats_json(r: *const RtoptRun, out: *mut *mut c_char) -> RtoptStatus {
    guard(|| {
        let r = ref_arg(r, "run")?;
        let s = serde_json::to_string_pretty(&r.inner.stats()).map_err(Error::from)?;
        put(out, c_string(s))
    })
}

/// The final policy as the JSON written to `policy.json`.
///
/// # Safety
/// `r` must be a live run handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rtopt_run_policy_json(r: *const RtoptRun, out: *mut *mut c_char) -> RtoptStatus {
    guard(|| {
        let r = ref_arg(r, "run")?;
        let s = serde_json::to_string_pretty(&r.inner.final_phase().solve.policy.to_record()).map_err(Error::from)?;
        put(out, c_string(s))
    })
}
