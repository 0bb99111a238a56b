//! C ABI over the energyscape core.
//!
//! Every function returns an [`EsStatus`]; results come back through out
//! pointers. Models are opaque [`EsMemModel`] handles released with
//! [`es_mem_free`]. After a failure, [`es_last_error`] describes it for the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use energyscape::binarize::{binarize_mean, BinaryStateSequence};
use energyscape::landscape::{energy_series, feature_vector, EnergySeries, Source, FEATURE_LEN};
use energyscape::mem::{fit, FitConfig, MemModel};
use energyscape::stats::mann_whitney_u;
use energyscape::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// More units than exact enumeration supports.
    Capacity = 3,
    /// Constant columns, degenerate moments or empty samples.
    Degenerate = 4,
    /// The fit stopped before converging; the partial model is still returned.
    NonConvergence = 5,
    Range = 6,
    Internal = 99,
}

/// Opaque fitted or user-built pairwise model.
pub struct EsMemModel {
    inner: MemModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> EsStatus {
    match err {
        Error::Capacity { .. } => EsStatus::Capacity,
        Error::DegenerateColumn { .. }
        | Error::DegenerateMoment { .. }
        | Error::DegenerateInput(_)
        | Error::DegenerateData(_)
        | Error::EmptySample
        | Error::EmptyExtrema(_) => EsStatus::Degenerate,
        Error::NonConvergence { .. } => EsStatus::NonConvergence,
        Error::Range(_) => EsStatus::Range,
        _ => EsStatus::InvalidArgument,
    }
}

fn fail(err: Error) -> EsStatus {
    let s = status_of(&err);
    set_error(err.to_string());
    s
}

fn null(name: &str) -> EsStatus {
    set_error(format!("{name} is null"));
    EsStatus::NullPointer
}

/// Run `f`, mapping panics to `Internal`.
fn guard(f: impl FnOnce() -> EsStatus) -> EsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            EsStatus::Internal
        }
    }
}

/// Borrow `len` elements; a null pointer is allowed only when `len == 0`.
unsafe fn input<'a, T>(p: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(p, len))
    }
}

unsafe fn output<'a, T>(p: *mut T, len: usize) -> Option<&'a mut [T]> {
    if len == 0 {
        Some(&mut [])
    } else if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts_mut(p, len))
    }
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn es_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn es_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn into_handle(model: MemModel, out: *mut *mut EsMemModel) {
    // SAFETY: caller checked `out` for null
    unsafe { *out = Box::into_raw(Box::new(EsMemModel { inner: model })) };
}

/// Build a model from fields `h[n_units]` and upper-triangle couplings
/// `w_upper[n_units (n_units - 1) / 2]`, row-major over `i < j`.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn es_mem_model_new(
    n_units: usize,
    h: *const f64,
    w_upper: *const f64,
    out: *mut *mut EsMemModel,
) -> EsStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let Some(h) = input(h, n_units) else { return null("h") };
        let Some(w) = input(w_upper, n_units * n_units.saturating_sub(1) / 2) else { return null("w_upper") };
        match MemModel::from_upper(h.to_vec(), w) {
            Ok(m) => {
                into_handle(m, out);
                EsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Fit a model to row-major binary states `states[n_timepoints * n_units]`
/// (0 or 1) with default settings. On `ES_STATUS_NON_CONVERGENCE` the partial
/// model is still written to `out` and must be freed.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn es_mem_fit(
    states: *const u8,
    n_timepoints: usize,
    n_units: usize,
    out: *mut *mut EsMemModel,
) -> EsStatus {
    guard(|| {
        if out.is_null() {
            return null("out");
        }
        let Some(cells) = input(states, n_timepoints * n_units) else { return null("states") };
        let arr = match ndarray::Array2::from_shape_vec((n_timepoints, n_units), cells.to_vec()) {
            Ok(a) => a,
            Err(e) => return fail(Error::Validation(e.to_string())),
        };
        let seq = match BinaryStateSequence::from_states(arr) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        match fit(&seq, &FitConfig::default()) {
            Ok(m) => {
                into_handle(m, out);
                EsStatus::Ok
            }
            Err(Error::NonConvergence { iterations, max_gradient, partial }) => {
                set_error(format!("fit did not converge after {iterations} iterations (max gradient {max_gradient:e})"));
                into_handle(*partial, out);
                EsStatus::NonConvergence
            }
            Err(e) => fail(e),
        }
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn es_mem_free(model: *mut EsMemModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of units, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn es_mem_n_units(model: *const EsMemModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_units())
}

/// Copy `h[n_units]` and the full symmetric `w[n_units * n_units]`.
///
/// # Safety
/// `model` must be a live handle; buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn es_mem_params(model: *const EsMemModel, h_out: *mut f64, w_out: *mut f64) -> EsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return null("model") };
        let n = m.inner.n_units();
        let Some(h) = output(h_out, n) else { return null("h_out") };
        let Some(w) = output(w_out, n * n) else { return null("w_out") };
        h.copy_from_slice(m.inner.h());
        for (dst, src) in w.iter_mut().zip(m.inner.w().iter()) {
            *dst = *src;
        }
        EsStatus::Ok
    })
}

/// Energy of the state with bit `i` of `code` giving unit `i`.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn es_mem_energy(model: *const EsMemModel, code: u32, out: *mut f64) -> EsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return null("model") };
        if out.is_null() {
            return null("out");
        }
        match m.inner.energy(code) {
            Ok(e) => {
                *out = e;
                EsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Log partition function.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn es_mem_log_partition(model: *const EsMemModel, out: *mut f64) -> EsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return null("model") };
        if out.is_null() {
            return null("out");
        }
        *out = m.inner.log_partition();
        EsStatus::Ok
    })
}

/// Fit quality of a fitted model. Models built with `es_mem_model_new` have
/// no diagnostics and return `ES_STATUS_INVALID_ARGUMENT`.
///
/// # Safety
/// `model` must be a live handle; out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn es_mem_fit_quality(
    model: *const EsMemModel,
    moment_correlation: *mut f64,
    accepted: *mut bool,
    converged: *mut bool,
) -> EsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return null("model") };
        if moment_correlation.is_null() || accepted.is_null() || converged.is_null() {
            return null("out");
        }
        let Some(d) = m.inner.diagnostics() else {
            set_error("model was not fitted".into());
            return EsStatus::InvalidArgument;
        };
        *moment_correlation = d.moment_correlation;
        *accepted = d.accepted;
        *converged = d.converged;
        EsStatus::Ok
    })
}

/// Mean-threshold binarization of row-major `signals[n_timepoints * n_units]`
/// into `states_out` (same shape) and `codes_out[n_timepoints]`; either output
/// may be null.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn es_binarize_mean(
    signals: *const f64,
    n_timepoints: usize,
    n_units: usize,
    states_out: *mut u8,
    codes_out: *mut u32,
) -> EsStatus {
    guard(|| {
        let Some(cells) = input(signals, n_timepoints * n_units) else { return null("signals") };
        let arr = match ndarray::Array2::from_shape_vec((n_timepoints, n_units), cells.to_vec()) {
            Ok(a) => a,
            Err(e) => return fail(Error::Validation(e.to_string())),
        };
        let seq = match binarize_mean(&arr) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        if !states_out.is_null() {
            let dst = slice::from_raw_parts_mut(states_out, n_timepoints * n_units);
            for (d, s) in dst.iter_mut().zip(seq.states().iter()) {
                *d = *s;
            }
        }
        if !codes_out.is_null() {
            slice::from_raw_parts_mut(codes_out, n_timepoints).copy_from_slice(seq.codes());
        }
        EsStatus::Ok
    })
}

/// Energy of each state code in `codes[len]`, written to `out[len]`.
///
/// # Safety
/// `model` must be a live handle; buffers valid for `len`.
#[no_mangle]
pub unsafe extern "C" fn es_energy_series(
    model: *const EsMemModel,
    codes: *const u32,
    len: usize,
    out: *mut f64,
) -> EsStatus {
    guard(|| {
        let Some(m) = model.as_ref() else { return null("model") };
        let Some(codes) = input(codes, len) else { return null("codes") };
        let Some(dst) = output(out, len) else { return null("out") };
        let seq = match BinaryStateSequence::from_codes(codes, m.inner.n_units()) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        match energy_series(&m.inner, &seq, Source::HighOrder) {
            Ok(series) => {
                dst.copy_from_slice(&series.values);
                EsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of entries written by [`es_landscape_features`].
#[no_mangle]
pub extern "C" fn es_feature_len() -> usize {
    FEATURE_LEN
}

/// The landscape feature vector of an energy series `values[len]`, written
/// to `out[es_feature_len()]`.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn es_landscape_features(
    values: *const f64,
    len: usize,
    fraction: f64,
    out: *mut f64,
) -> EsStatus {
    guard(|| {
        let Some(v) = input(values, len) else { return null("values") };
        let Some(dst) = output(out, FEATURE_LEN) else { return null("out") };
        match feature_vector(&EnergySeries::new(v.to_vec(), Source::HighOrder), fraction) {
            Ok(f) => {
                dst.copy_from_slice(&f);
                EsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Two-sided Mann-Whitney test; `u_out` is the statistic of sample `a`.
///
/// # Safety
/// Buffers must be valid for the stated lengths; outputs writable.
#[no_mangle]
pub unsafe extern "C" fn es_mann_whitney(
    a: *const f64,
    n1: usize,
    b: *const f64,
    n2: usize,
    u_out: *mut f64,
    p_out: *mut f64,
) -> EsStatus {
    guard(|| {
        let Some(a) = input(a, n1) else { return null("a") };
        let Some(b) = input(b, n2) else { return null("b") };
        if u_out.is_null() || p_out.is_null() {
            return null("out");
        }
        match mann_whitney_u(a, b) {
            Ok(t) => {
                *u_out = t.u_statistic;
                *p_out = t.p_value;
                EsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
