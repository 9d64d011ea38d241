//! C ABI for `switchem`.
//!
//! Objects are opaque handles created by `*_new`/`*_simulate`/`switchem_fit`
//! and released by the matching `*_free`. Every fallible call returns a
//! [`SwitchemStatus`]; on failure the message is available from
//! [`switchem_last_error`] until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use switchem::config::ConfigFile;
use switchem::em::{em_fit, sort_by_level, EmResult, FitStatus};
use switchem::io::FitReport;
use switchem::nig::NigParams;
use switchem::sim::{simulate_path, ObservationSeries};
use switchem::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchemStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

/// Observation series `X_{t_0..t_n}`.
pub struct SwitchemSeries {
    inner: ObservationSeries,
}

/// A finished fit.
pub struct SwitchemFit {
    result: EmResult,
    report: FitReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SwitchemStatus {
    match e {
        Error::Numerical { .. } | Error::ImpossibleTransition { .. } | Error::Iteration { .. } => {
            SwitchemStatus::Numerical
        }
        Error::Io(_) => SwitchemStatus::Io,
        _ => SwitchemStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SwitchemStatus, String)>) -> SwitchemStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SwitchemStatus::Ok
        }
        Ok(Err((code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            SwitchemStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SwitchemStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SwitchemStatus, String) {
    (SwitchemStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SwitchemStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SwitchemStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn switchem_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Wraps `len` observations with step `h`. The data are copied.
///
/// # Safety
/// `x` must point to `len` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn switchem_series_new(
    x: *const c_double,
    len: usize,
    h: c_double,
    out: *mut *mut SwitchemSeries,
) -> SwitchemStatus {
    guard(|| {
        if x.is_null() {
            return Err(null("x"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let data = std::slice::from_raw_parts(x, len).to_vec();
        let inner = ObservationSeries::new(data, h).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SwitchemSeries { inner }));
        Ok(())
    })
}

/// Simulates a path from a JSON config (same schema as the CLI) with `seed`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn switchem_series_simulate(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut SwitchemSeries,
) -> SwitchemStatus {
    guard(|| {
        let text = read_str(config_json, "config_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ConfigFile::from_json(text).map_err(lib_err)?;
        let sim = cfg.simulation(seed).map_err(lib_err)?;
        let path = simulate_path(&sim).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SwitchemSeries { inner: path.obs }));
        Ok(())
    })
}

/// Number of stored values (`n + 1`); 0 for a null handle.
///
/// # Safety
/// `series` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn switchem_series_len(series: *const SwitchemSeries) -> usize {
    series.as_ref().map_or(0, |s| s.inner.x.len())
}

/// Copies the values into `buf`, which must hold `len >= switchem_series_len` doubles.
///
/// # Safety
/// `series` must be a live handle and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn switchem_series_copy(
    series: *const SwitchemSeries,
    buf: *mut c_double,
    len: usize,
) -> SwitchemStatus {
    guard(|| {
        let s = series.as_ref().ok_or_else(|| null("series"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        if len < s.inner.x.len() {
            return Err((
                SwitchemStatus::InvalidArgument,
                format!("buffer holds {len} values, need {}", s.inner.x.len()),
            ));
        }
        ptr::copy_nonoverlapping(s.inner.x.as_ptr(), buf, s.inner.x.len());
        Ok(())
    })
}

/// # Safety
/// `series` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn switchem_series_free(series: *mut SwitchemSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Runs the EM fit on `series` using the `simulation.generator` and `em`
/// sections of `config_json`. A random start uses `simulation.seed`.
///
/// A fit that ends in numerical failure still produces a handle and returns
/// `SWITCHEM_STATUS_NUMERICAL`.
///
/// # Safety
/// `series` must be a live handle, `config_json` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn switchem_fit(
    series: *const SwitchemSeries,
    config_json: *const c_char,
    out: *mut *mut SwitchemFit,
) -> SwitchemStatus {
    guard(|| {
        let s = series.as_ref().ok_or_else(|| null("series"))?;
        let text = read_str(config_json, "config_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ConfigFile::from_json(text).map_err(lib_err)?;
        let g = cfg.generator().map_err(lib_err)?;
        let seed = cfg.simulation.seed;
        let em = cfg.em(seed).map_err(lib_err)?;
        let truth = cfg.truth().map_err(lib_err)?;
        let result = em_fit(&s.inner, &g, &em).map_err(lib_err)?;
        let config = serde_json::to_value(&cfg).map_err(|e| lib_err(e.into()))?;
        let report = FitReport::new(&result, truth.as_ref(), config, seed).map_err(lib_err)?;
        let failure = result.failure.clone();
        *out = Box::into_raw(Box::new(SwitchemFit { result, report }));
        match failure {
            Some(f) => Err((SwitchemStatus::Numerical, f)),
            None => Ok(()),
        }
    })
}

/// 0 converged, 1 iteration limit reached, 2 numerical failure, -1 null handle.
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn switchem_fit_status(fit: *const SwitchemFit) -> i32 {
    match fit.as_ref().map(|f| f.result.status) {
        Some(FitStatus::Converged) => 0,
        Some(FitStatus::MaxItersReached) => 1,
        Some(FitStatus::NumericalFailure) => 2,
        None => -1,
    }
}

/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn switchem_fit_iterations(fit: *const SwitchemFit) -> usize {
    fit.as_ref().map_or(0, |f| f.result.iterations)
}

/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn switchem_fit_n_states(fit: *const SwitchemFit) -> usize {
    fit.as_ref().map_or(0, |f| f.result.estimate.n_states())
}

/// Writes the estimate with regimes ordered by decreasing drift level.
/// `b` must hold `n_states` doubles.
///
/// # Safety
/// `fit` must be a live handle; `b`, `lambda`, `delta` writable.
#[no_mangle]
pub unsafe extern "C" fn switchem_fit_estimate(
    fit: *const SwitchemFit,
    b: *mut c_double,
    n_states: usize,
    lambda: *mut c_double,
    delta: *mut c_double,
) -> SwitchemStatus {
    guard(|| {
        let f = fit.as_ref().ok_or_else(|| null("fit"))?;
        if b.is_null() || lambda.is_null() || delta.is_null() {
            return Err(null("output pointer"));
        }
        let (sorted, _) = sort_by_level(&f.result.estimate);
        if n_states != sorted.n_states() {
            return Err((
                SwitchemStatus::InvalidArgument,
                format!("model has {} states, buffer holds {n_states}", sorted.n_states()),
            ));
        }
        ptr::copy_nonoverlapping(sorted.b.as_ptr(), b, n_states);
        *lambda = sorted.lambda;
        *delta = sorted.delta;
        Ok(())
    })
}

/// The `result.json` document for this fit. Free with [`switchem_string_free`].
///
/// # Safety
/// `fit` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn switchem_fit_result_json(fit: *const SwitchemFit) -> *mut c_char {
    let Some(f) = fit.as_ref() else {
        set_error("fit is null");
        return ptr::null_mut();
    };
    match f.report.to_json() {
        Ok(bytes) => CString::new(bytes).map_or(ptr::null_mut(), CString::into_raw),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `fit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn switchem_fit_free(fit: *mut SwitchemFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn switchem_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Density of `NIG(a, 0, delta * t, 0)` at `z`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn switchem_nig_density(
    a: c_double,
    delta: c_double,
    t: c_double,
    z: c_double,
    out: *mut c_double,
) -> SwitchemStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = NigParams::new(a, delta, t).map_err(lib_err)?;
        *out = p.density(z);
        Ok(())
    })
}
