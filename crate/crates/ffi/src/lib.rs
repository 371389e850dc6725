//! C ABI over the coca engine.
//!
//! Every function returns a [`CocaStatus`]; on failure a message is kept per
//! thread and can be read with [`coca_last_error`]. Objects are opaque
//! handles created by `*_new`/`*_load` functions and released by the matching
//! `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use coca::adaptation::{coca_step, CocaConfig, Learner, TauConfig, TauState};
use coca::autodiff::Tensor;
use coca::harness::{run, RunConfig};
use coca::models::{load_checkpoint, Model};
use coca::CocaError;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CocaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Config = 4,
    Io = 5,
    Format = 6,
    Utf8 = 7,
    Internal = 8,
}

impl From<&CocaError> for CocaStatus {
    fn from(e: &CocaError) -> Self {
        match e {
            CocaError::Shape { .. } => CocaStatus::ShapeMismatch,
            CocaError::InvalidArgument(_) => CocaStatus::InvalidArgument,
            CocaError::Config(_) | CocaError::Json(_) => CocaStatus::Config,
            CocaError::Io { .. } => CocaStatus::Io,
            CocaError::Format { .. } | CocaError::Csv(_) => CocaStatus::Format,
            CocaError::Backward(_) => CocaStatus::Internal,
        }
    }
}

/// A loaded source model.
pub struct CocaModel {
    inner: Model,
}

/// Online co-adaptation state for an anchor and an auxiliary model.
pub struct CocaSession {
    anchor: Learner,
    aux: Learner,
    tau: TauState,
    config: CocaConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(CocaStatus, String);

impl From<CocaError> for Failure {
    fn from(e: CocaError) -> Self {
        Failure(CocaStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CocaStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CocaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CocaStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            CocaStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CocaStatus::Utf8, format!("{what} is not valid UTF-8")))
}

unsafe fn features_arg(data: *const f64, rows: usize, cols: usize) -> Result<Tensor, Failure> {
    if data.is_null() {
        return Err(null("features"));
    }
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| Failure(CocaStatus::InvalidArgument, "rows * cols overflows".into()))?;
    let values = std::slice::from_raw_parts(data, n).to_vec();
    Ok(Tensor::new(vec![rows, cols], values)?)
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn coca_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coca_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coca_model_load(
    path: *const c_char,
    out: *mut *mut CocaModel,
) -> CocaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (inner, _) = load_checkpoint(Path::new(path))?;
        out.write(Box::into_raw(Box::new(CocaModel { inner })));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`coca_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coca_model_free(model: *mut CocaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reports the number of classes, flattened input width and parameter count.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null to skip it.
#[no_mangle]
pub unsafe extern "C" fn coca_model_info(
    model: *const CocaModel,
    num_classes: *mut usize,
    input_len: *mut usize,
    param_count: *mut usize,
) -> CocaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        for (p, v) in [
            (num_classes, m.num_classes()),
            (input_len, m.spec().input_len()),
            (param_count, m.param_count()),
        ] {
            if !p.is_null() {
                p.write(v);
            }
        }
        Ok(())
    })
}

/// Computes `rows x num_classes` logits for `rows x input_len` features.
///
/// # Safety
/// `features` must hold `rows * input_len` values and `logits` room for
/// `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn coca_model_predict(
    model: *const CocaModel,
    features: *const f64,
    rows: usize,
    logits: *mut f64,
    logits_len: usize,
) -> CocaStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let x = features_arg(features, rows, m.spec().input_len())?;
        let out = m.forward_logits(&x)?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        if logits_len < out.len() {
            return Err(Failure(
                CocaStatus::InvalidArgument,
                format!(
                    "logits buffer holds {logits_len} values, {} needed",
                    out.len()
                ),
            ));
        }
        ptr::copy_nonoverlapping(out.data().as_ptr(), logits, out.len());
        Ok(())
    })
}

/// Starts a co-adaptation session from copies of two models. The model with
/// more parameters becomes the anchor regardless of argument order.
///
/// # Safety
/// Both models must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coca_session_new(
    first: *const CocaModel,
    second: *const CocaModel,
    lr_first: f64,
    lr_second: f64,
    momentum: f64,
    out: *mut *mut CocaSession,
) -> CocaStatus {
    guard(|| {
        let a = &first.as_ref().ok_or_else(|| null("first"))?.inner;
        let b = &second.as_ref().ok_or_else(|| null("second"))?.inner;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut pair = [(a, lr_first), (b, lr_second)];
        if b.param_count() > a.param_count() {
            pair.swap(0, 1);
        }
        let session = CocaSession {
            anchor: Learner::new(pair[0].0.clone(), pair[0].1, momentum)?,
            aux: Learner::new(pair[1].0.clone(), pair[1].1, momentum)?,
            tau: TauState::new(TauConfig::default())?,
            config: CocaConfig::default(),
        };
        out.write(Box::into_raw(Box::new(session)));
        Ok(())
    })
}

/// Releases a session. Null is ignored.
///
/// # Safety
/// `session` must come from [`coca_session_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coca_session_free(session: *mut CocaSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Adapts on one unlabeled batch and writes the combined prediction of every
/// row into `predictions` (length `rows`).
///
/// # Safety
/// `features` must hold `rows * input_len` values and `predictions` room for
/// `rows` values.
#[no_mangle]
pub unsafe extern "C" fn coca_session_step(
    session: *mut CocaSession,
    features: *const f64,
    rows: usize,
    predictions: *mut usize,
) -> CocaStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let x = features_arg(features, rows, s.anchor.model.spec().input_len())?;
        if predictions.is_null() {
            return Err(null("predictions"));
        }
        let out = coca_step(&mut s.anchor, &mut s.aux, &mut s.tau, &x, &s.config)?;
        ptr::copy_nonoverlapping(out.combined().as_ptr(), predictions, rows);
        Ok(())
    })
}

/// Current temperature of the session.
///
/// # Safety
/// `session` must be a live handle and `tau` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn coca_session_tau(
    session: *const CocaSession,
    tau: *mut f64,
) -> CocaStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        write_out(tau, s.tau.tau, "tau")
    })
}

/// Runs a JSON experiment config and returns the report as JSON. The string
/// must be released with [`coca_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `report_json` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn coca_run_json(
    config_json: *const c_char,
    report_json: *mut *mut c_char,
) -> CocaStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        if report_json.is_null() {
            return Err(null("report_json"));
        }
        let report = run(&RunConfig::from_json(text)?)?.to_json()?;
        let c = CString::new(report)
            .map_err(|_| Failure(CocaStatus::Internal, "report contains NUL".into()))?;
        report_json.write(c.into_raw());
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coca_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
