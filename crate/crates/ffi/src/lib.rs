//! C interface to convrec.
//!
//! Sessions are opaque handles created with [`convrec_session_new`] and
//! released with [`convrec_session_free`]. Every fallible call returns a
//! [`ConvrecStatus`]; on failure [`convrec_last_error`] describes the cause.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use convrec::cds::plan_schedule;
use convrec::cli::test_settings;
use convrec::config::RunConfig;
use convrec::dataset::{load_dataset, Dataset};
use convrec::evaluator::{evaluate, hit_rate_at_k, ndcg_at_k, MetricReport};
use convrec::model::Model;
use convrec::trainer::fit;
use convrec::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvrecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Numeric = 6,
    /// The call needs data or a model the session does not hold yet.
    State = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Ranking quality on the test positions.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ConvrecMetrics {
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub evaluated_users: usize,
    pub excluded_users: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ConvrecLayer {
    pub kernel: usize,
    pub stride: usize,
}

/// Opaque session state.
pub struct ConvrecSession {
    config: RunConfig,
    data: Option<Dataset>,
    model: Option<Model>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn record(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: ConvrecStatus, message: impl Into<String>) -> ConvrecStatus {
    record(message.into());
    status
}

fn from_error(e: Error) -> ConvrecStatus {
    let status = match &e {
        Error::Config(_) => ConvrecStatus::Config,
        Error::Format { .. } | Error::Incompatible(_) => ConvrecStatus::Checkpoint,
        Error::Numeric(_) | Error::Dimension { .. } => ConvrecStatus::Numeric,
        _ => ConvrecStatus::Data,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), ConvrecStatus>) -> ConvrecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            record(String::new());
            ConvrecStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(ConvrecStatus::Panic, "internal panic"),
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, ConvrecStatus> {
    if p.is_null() {
        return Err(fail(ConvrecStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ConvrecStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn session<'a>(s: *mut ConvrecSession) -> Result<&'a mut ConvrecSession, ConvrecStatus> {
    s.as_mut().ok_or_else(|| fail(ConvrecStatus::NullPointer, "session is null"))
}

fn metrics(r: &MetricReport) -> ConvrecMetrics {
    ConvrecMetrics {
        hr_at_k: r.hr_at_k,
        ndcg_at_k: r.ndcg_at_k,
        k: r.k,
        evaluated_users: r.evaluated_users,
        excluded_users: r.excluded_users,
    }
}

/// Message for the most recent failure on this thread, empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn convrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn convrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a session from a named preset, or from the defaults when `preset`
/// is null.
///
/// # Safety
/// `preset` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_new(preset: *const c_char, out: *mut *mut ConvrecSession) -> ConvrecStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(ConvrecStatus::NullPointer, "out is null"));
        }
        let config = if preset.is_null() {
            RunConfig::default()
        } else {
            RunConfig::preset(text(preset, "preset")?).map_err(from_error)?
        };
        let s = Box::new(ConvrecSession {
            config,
            data: None,
            model: None,
        });
        *out = Box::into_raw(s);
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from [`convrec_session_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_free(s: *mut ConvrecSession) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Sets one configuration key, using the same names as `--set` on the command line.
///
/// # Safety
/// `s` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_set(
    s: *mut ConvrecSession,
    key: *const c_char,
    value: *const c_char,
) -> ConvrecStatus {
    guard(|| {
        let s = session(s)?;
        let (key, value) = (text(key, "key")?, text(value, "value")?);
        let mut next = s.config.clone();
        next.set(key, value).map_err(from_error)?;
        next.validate().map_err(from_error)?;
        s.config = next;
        Ok(())
    })
}

/// Loads interactions and, when `item_attributes` is not null, the attribute file.
/// Any model held by the session is dropped.
///
/// # Safety
/// `s` must be a live handle; paths NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_load_data(
    s: *mut ConvrecSession,
    interactions: *const c_char,
    item_attributes: *const c_char,
) -> ConvrecStatus {
    guard(|| {
        let s = session(s)?;
        s.config.data = Some(PathBuf::from(text(interactions, "interactions")?));
        s.config.item_attributes = if item_attributes.is_null() {
            None
        } else {
            Some(PathBuf::from(text(item_attributes, "item_attributes")?))
        };
        let paths = s.config.data_paths().map_err(from_error)?;
        s.data = Some(load_dataset(&paths, &s.config.dataset_options()).map_err(from_error)?);
        s.model = None;
        Ok(())
    })
}

fn need_data(s: &ConvrecSession) -> Result<&Dataset, ConvrecStatus> {
    s.data.as_ref().ok_or_else(|| fail(ConvrecStatus::State, "no data loaded"))
}

/// Trains a fresh model and, when `out` is not null, writes its test metrics.
///
/// # Safety
/// `s` must be a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_train(s: *mut ConvrecSession, out: *mut ConvrecMetrics) -> ConvrecStatus {
    guard(|| {
        let s = session(s)?;
        let ds = need_data(s)?;
        convrec::numerics::set_threads(s.config.threads);
        let mut model = Model::for_dataset(s.config.model.clone(), ds, s.config.seed()).map_err(from_error)?;
        fit(&mut model, ds, &s.config.train, |_| {}).map_err(from_error)?;
        let report = evaluate(&model, ds, &test_settings(&s.config)).map_err(from_error)?;
        s.model = Some(model);
        if let Some(out) = out.as_mut() {
            *out = metrics(&report);
        }
        Ok(())
    })
}

/// Evaluates the held model on the test positions.
///
/// # Safety
/// `s` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_evaluate(s: *mut ConvrecSession, out: *mut ConvrecMetrics) -> ConvrecStatus {
    guard(|| {
        let s = session(s)?;
        if out.is_null() {
            return Err(fail(ConvrecStatus::NullPointer, "out is null"));
        }
        let ds = need_data(s)?;
        let model = s.model.as_ref().ok_or_else(|| fail(ConvrecStatus::State, "no model trained or loaded"))?;
        let report = evaluate(model, ds, &test_settings(&s.config)).map_err(from_error)?;
        *out = metrics(&report);
        Ok(())
    })
}

/// # Safety
/// `s` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_save_checkpoint(s: *mut ConvrecSession, path: *const c_char) -> ConvrecStatus {
    guard(|| {
        let s = session(s)?;
        let path = text(path, "path")?;
        let model = s.model.as_ref().ok_or_else(|| fail(ConvrecStatus::State, "no model trained or loaded"))?;
        model.save(path.as_ref()).map_err(from_error)
    })
}

/// Restores a checkpoint into a model shaped by the current configuration and data.
///
/// # Safety
/// `s` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_load_checkpoint(s: *mut ConvrecSession, path: *const c_char) -> ConvrecStatus {
    guard(|| {
        let s = session(s)?;
        let path = text(path, "path")?;
        let ds = need_data(s)?;
        let mut model = Model::for_dataset(s.config.model.clone(), ds, s.config.seed()).map_err(from_error)?;
        model.load(path.as_ref()).map_err(from_error)?;
        s.model = Some(model);
        Ok(())
    })
}

/// # Safety
/// `s` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn convrec_session_param_count(s: *mut ConvrecSession, out: *mut usize) -> ConvrecStatus {
    guard(|| {
        let s = session(s)?;
        let model = s.model.as_ref().ok_or_else(|| fail(ConvrecStatus::State, "no model trained or loaded"))?;
        *out.as_mut().ok_or_else(|| fail(ConvrecStatus::NullPointer, "out is null"))? = model.param_count();
        Ok(())
    })
}

/// Plans the pyramid for an input of `len` rows and writes each block's output
/// length. `out_n` receives the block count even when the buffer is too small.
///
/// # Safety
/// `layers` must point to `n_layers` entries and `out_lengths` to `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn convrec_plan_schedule(
    len: usize,
    layers: *const ConvrecLayer,
    n_layers: usize,
    out_lengths: *mut usize,
    capacity: usize,
    out_n: *mut usize,
) -> ConvrecStatus {
    guard(|| {
        if (layers.is_null() && n_layers > 0) || out_n.is_null() {
            return Err(fail(ConvrecStatus::NullPointer, "layers or out_n is null"));
        }
        let layers: Vec<(usize, usize)> = if n_layers == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(layers, n_layers).iter().map(|l| (l.kernel, l.stride)).collect()
        };
        let plan = plan_schedule(len, &layers).map_err(from_error)?;
        *out_n = plan.lengths.len();
        if plan.lengths.len() > capacity {
            return Err(fail(ConvrecStatus::BufferTooSmall, format!("need {} slots", plan.lengths.len())));
        }
        if !plan.lengths.is_empty() {
            if out_lengths.is_null() {
                return Err(fail(ConvrecStatus::NullPointer, "out_lengths is null"));
            }
            std::slice::from_raw_parts_mut(out_lengths, plan.lengths.len()).copy_from_slice(&plan.lengths);
        }
        Ok(())
    })
}

unsafe fn metric_of(
    ranks: *const usize,
    n: usize,
    k: usize,
    out: *mut f64,
    f: fn(&[usize], usize) -> convrec::Result<f64>,
) -> ConvrecStatus {
    guard(|| {
        if (ranks.is_null() && n > 0) || out.is_null() {
            return Err(fail(ConvrecStatus::NullPointer, "ranks or out is null"));
        }
        let ranks = if n == 0 { &[][..] } else { std::slice::from_raw_parts(ranks, n) };
        *out = f(ranks, k).map_err(from_error)?;
        Ok(())
    })
}

/// Fraction of 1-based ranks within the top `k`.
///
/// # Safety
/// `ranks` must point to `n` entries; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn convrec_hit_rate(ranks: *const usize, n: usize, k: usize, out: *mut f64) -> ConvrecStatus {
    metric_of(ranks, n, k, out, hit_rate_at_k)
}

/// Mean discounted gain of 1-based ranks within the top `k`.
///
/// # Safety
/// `ranks` must point to `n` entries; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn convrec_ndcg(ranks: *const usize, n: usize, k: usize, out: *mut f64) -> ConvrecStatus {
    metric_of(ranks, n, k, out, ndcg_at_k)
}
