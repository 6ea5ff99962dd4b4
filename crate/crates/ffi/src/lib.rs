//! C interface to `rwdfusion`.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every fallible call returns an [`RwdStatus`]; the
//! message for the most recent failure on the calling thread is available
//! from [`rwd_last_error`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rwdfusion::bench::{emit, run_grid, ExperimentGrid};
use rwdfusion::config;
use rwdfusion::fusion::{run_method, Method};
use rwdfusion::synthgen::{replication, stream, Column, Dataset};
use rwdfusion::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RwdStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad UTF-8, unknown method / column, buffer too small.
    InvalidArgument = 2,
    /// Configuration rejected.
    Config = 3,
    /// An estimator or data generator failed.
    Estimation = 4,
    Io = 5,
    Panic = 6,
}

/// Experiment configuration.
pub struct RwdConfig(ExperimentGrid);

/// A generated dataset.
pub struct RwdDataset(Dataset);

/// One method's estimate.
pub struct RwdEstimate {
    tau: f64,
    var: f64,
    ci: (f64, f64),
    weight: Option<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> RwdStatus {
    match e {
        Error::Config(_) | Error::Parse(_) => RwdStatus::Config,
        Error::UnknownMethod { .. } | Error::UnknownColumn(_) => RwdStatus::InvalidArgument,
        Error::Io(_) => RwdStatus::Io,
        _ => RwdStatus::Estimation,
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (RwdStatus, String)>) -> RwdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RwdStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            RwdStatus::Panic
        }
    }
}

fn lib(e: Error) -> (RwdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (RwdStatus, String) {
    (RwdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (RwdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (RwdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(slot: *mut *mut T, value: T) {
    *slot = Box::into_raw(Box::new(value));
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rwd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Default configuration. Never null.
#[no_mangle]
pub extern "C" fn rwd_config_default() -> *mut RwdConfig {
    Box::into_raw(Box::new(RwdConfig(ExperimentGrid::default())))
}

/// Parses a config text (`key = value` lines).
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rwd_config_parse(text: *const c_char, out: *mut *mut RwdConfig) -> RwdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = config::parse(c_str(text, "text")?).map_err(lib)?;
        put(out, RwdConfig(g));
        Ok(())
    })
}

/// Sets one key, with the same names and syntax as the config file.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rwd_config_set(cfg: *mut RwdConfig, key: *const c_char, value: *const c_char) -> RwdStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let mut g = cfg.0.clone();
        config::set(&mut g, c_str(key, "key")?, c_str(value, "value")?).map_err(lib)?;
        g.scenario.psi = g.psi.first().copied().unwrap_or(0.0);
        g.validate().map_err(lib)?;
        cfg.0 = g;
        Ok(())
    })
}

/// Renders the configuration; release with [`rwd_string_free`]. Null if
/// `cfg` is null.
///
/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rwd_config_render(cfg: *const RwdConfig) -> *mut c_char {
    match cfg.as_ref() {
        Some(c) => CString::new(config::render(&c.0)).map_or(ptr::null_mut(), CString::into_raw),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `cfg` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rwd_config_free(cfg: *mut RwdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// # Safety
/// `s` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rwd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates replication `rep` of the configured scenario at the first
/// grid psi.
///
/// # Safety
/// `cfg` must come from this library; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn rwd_simulate(
    cfg: *const RwdConfig,
    rep: u64,
    out_rct: *mut *mut RwdDataset,
    out_rwd: *mut *mut RwdDataset,
) -> RwdStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        if out_rct.is_null() || out_rwd.is_null() {
            return Err(null("out"));
        }
        let (r, o) = replication(&cfg.0.scenario, rep).map_err(lib)?;
        put(out_rct, RwdDataset(r));
        put(out_rwd, RwdDataset(o));
        Ok(())
    })
}

/// Number of rows; 0 for null.
///
/// # Safety
/// `data` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rwd_dataset_len(data: *const RwdDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Copies column `name` (`x1`, `a`, `y`, ...) into `buf`, which must hold
/// at least [`rwd_dataset_len`] values.
///
/// # Safety
/// `data` must come from this library; `buf` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn rwd_dataset_column(data: *const RwdDataset, name: *const c_char, buf: *mut f64, cap: usize) -> RwdStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        let col: Column = c_str(name, "name")?.parse().map_err(lib)?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let v = d.0.column(col);
        if cap < v.len() {
            return Err((RwdStatus::InvalidArgument, format!("buffer holds {cap} values, column has {}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), buf, v.len());
        Ok(())
    })
}

/// # Safety
/// `data` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rwd_dataset_free(data: *mut RwdDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Runs one registry method on a trial and an observational dataset.
/// Bootstrapped methods get percentile intervals.
///
/// # Safety
/// Handles must come from this library; `method` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rwd_estimate(
    cfg: *const RwdConfig,
    method: *const c_char,
    rct: *const RwdDataset,
    rwd: *const RwdDataset,
    seed: u64,
    out_est: *mut *mut RwdEstimate,
) -> RwdStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let rct = rct.as_ref().ok_or_else(|| null("rct"))?;
        let rwd = rwd.as_ref().ok_or_else(|| null("rwd"))?;
        if out_est.is_null() {
            return Err(null("out"));
        }
        let m: Method = c_str(method, "method")?.parse().map_err(lib)?;
        let g = &cfg.0;
        let res = run_method(m, &rct.0, &rwd.0, &g.learners, &g.hyper, &mut stream(seed, 0, 0)).map_err(lib)?;
        put(
            out_est,
            RwdEstimate {
                tau: res.estimate.tau_hat,
                var: res.estimate.var_hat,
                ci: res.estimate.ci,
                weight: res.diagnostics.learning_weight,
            },
        );
        Ok(())
    })
}

/// Point estimate; NaN for null.
///
/// # Safety
/// `est` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rwd_estimate_tau(est: *const RwdEstimate) -> f64 {
    est.as_ref().map_or(f64::NAN, |e| e.tau)
}

/// Variance estimate; NaN for null.
///
/// # Safety
/// `est` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rwd_estimate_variance(est: *const RwdEstimate) -> f64 {
    est.as_ref().map_or(f64::NAN, |e| e.var)
}

/// 95% interval into `lower` / `upper`.
///
/// # Safety
/// `est` must come from this library; `lower`, `upper` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn rwd_estimate_ci(est: *const RwdEstimate, lower: *mut f64, upper: *mut f64) -> RwdStatus {
    guard(|| {
        let e = est.as_ref().ok_or_else(|| null("est"))?;
        if lower.is_null() || upper.is_null() {
            return Err(null("bounds"));
        }
        *lower = e.ci.0;
        *upper = e.ci.1;
        Ok(())
    })
}

/// Learning weight on the observational data, or NaN if the method has none.
///
/// # Safety
/// `est` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn rwd_estimate_weight(est: *const RwdEstimate) -> f64 {
    est.as_ref().and_then(|e| e.weight).unwrap_or(f64::NAN)
}

/// # Safety
/// `est` must come from this library (or be null) and not be used again.
#[no_mangle]
pub unsafe extern "C" fn rwd_estimate_free(est: *mut RwdEstimate) {
    if !est.is_null() {
        drop(Box::from_raw(est));
    }
}

/// Runs the whole grid and writes the CSV and SVG outputs into `out_dir`.
///
/// # Safety
/// `cfg` must come from this library; `out_dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rwd_run_grid(cfg: *const RwdConfig, out_dir: *const c_char) -> RwdStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let dir = c_str(out_dir, "out_dir")?;
        let report = run_grid(&cfg.0).map_err(lib)?;
        emit(&report, Path::new(dir)).map_err(lib)?;
        Ok(())
    })
}
