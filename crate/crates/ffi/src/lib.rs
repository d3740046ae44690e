//! C ABI over the adamoge forecaster.
//!
//! Every fallible function returns an [`AdamogeStatus`]. On failure the
//! message is available from [`adamoge_last_error`] on the same thread.
//! Models are opaque handles created by [`adamoge_model_load`] and released
//! with [`adamoge_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use adamoge::cli::load_model;
use adamoge::config::RunConfig;
use adamoge::data::NormStats;
use adamoge::moge::AdaMoGe;
use adamoge::ndmath::{fft, Tensor};
use adamoge::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamogeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Checkpoint = 6,
    FingerprintMismatch = 7,
    Data = 8,
    Numeric = 9,
    BufferSize = 10,
    Panic = 11,
}

/// Loaded model with the normalization it was trained under.
pub struct AdamogeModel {
    model: AdaMoGe,
    stats: NormStats,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(AdamogeStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => AdamogeStatus::InvalidArgument,
            Error::Numeric { .. } => AdamogeStatus::Numeric,
            Error::Io { .. } => AdamogeStatus::Io,
            Error::Parse { .. } => AdamogeStatus::Parse,
            Error::Data(_) => AdamogeStatus::Data,
            Error::Config(_) => AdamogeStatus::Config,
            Error::Checkpoint(_) => AdamogeStatus::Checkpoint,
            Error::FingerprintMismatch { .. } => AdamogeStatus::FingerprintMismatch,
        };
        Failure(code, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AdamogeStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `body`, recording any error or panic for [`adamoge_last_error`].
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> AdamogeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => AdamogeStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            AdamogeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AdamogeStatus::InvalidArgument, format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const AdamogeModel) -> Result<&'a AdamogeModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Loads a checkpoint written by `adamoge train`.
///
/// `config_path` may be null for the built-in defaults. Unless
/// `allow_fingerprint_mismatch` is set, the checkpoint must have been
/// written for the same config.
///
/// # Safety
/// String arguments must be null or nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adamoge_model_load(
    config_path: *const c_char,
    checkpoint_path: *const c_char,
    allow_fingerprint_mismatch: bool,
    out: *mut *mut AdamogeModel,
) -> AdamogeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = std::ptr::null_mut();
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(path_arg(config_path, "config_path")?)?
        };
        let ckpt = path_arg(checkpoint_path, "checkpoint_path")?;
        let (model, stats) = load_model(&cfg, &ckpt, allow_fingerprint_mismatch)?;
        *out = Box::into_raw(Box::new(AdamogeModel { model, stats }));
        Ok(())
    })
}

/// Lookback, horizon and variable count of a model. Any output may be null.
///
/// # Safety
/// `model` must come from [`adamoge_model_load`]; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn adamoge_model_dims(
    model: *const AdamogeModel,
    lookback: *mut usize,
    horizon: *mut usize,
    variables: *mut usize,
) -> AdamogeStatus {
    guard(|| {
        let c = &model_ref(model)?.model.config;
        for (p, v) in [(lookback, c.lookback), (horizon, c.horizon), (variables, c.variables)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must come from [`adamoge_model_load`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adamoge_model_param_count(model: *const AdamogeModel, out: *mut usize) -> AdamogeStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.parameter_count();
        Ok(())
    })
}

/// Forecasts `n` windows in original units.
///
/// `window` holds `n * L * V` row-major values `(n, L, V)`; `out` receives
/// `n * H * V` values `(n, H, V)`.
///
/// # Safety
/// `window` must point to `window_len` readable doubles and `out` to
/// `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn adamoge_model_forecast(
    model: *const AdamogeModel,
    window: *const f64,
    window_len: usize,
    out: *mut f64,
    out_len: usize,
) -> AdamogeStatus {
    guard(|| {
        let m = model_ref(model)?;
        if window.is_null() {
            return Err(null("window"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let c = &m.model.config;
        let per_in = c.lookback * c.variables;
        if window_len == 0 || window_len % per_in != 0 {
            return Err(Failure(
                AdamogeStatus::BufferSize,
                format!("window length {window_len} is not a positive multiple of L*V = {per_in}"),
            ));
        }
        let n = window_len / per_in;
        let need = n * c.horizon * c.variables;
        if out_len != need {
            return Err(Failure(
                AdamogeStatus::BufferSize,
                format!("output length {out_len}, expected {need}"),
            ));
        }
        let x = Tensor::new(
            vec![n, c.lookback, c.variables],
            std::slice::from_raw_parts(window, window_len).to_vec(),
        )?;
        if !x.all_finite() {
            return Err(Failure(AdamogeStatus::InvalidArgument, "window contains non-finite values".into()));
        }
        let y = m.stats.denormalize(&m.model.forecast(&m.stats.normalize(&x)?)?)?;
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from [`adamoge_model_load`], and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn adamoge_model_free(model: *mut AdamogeModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Message of the last failed call on this thread, or null.
///
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn adamoge_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Unnormalized real FFT of `len >= 2` samples into `len / 2 + 1` bins.
///
/// # Safety
/// `x` must point to `len` readable doubles; `re` and `im` to `bins`
/// writable doubles each.
#[no_mangle]
pub unsafe extern "C" fn adamoge_rfft(
    x: *const f64,
    len: usize,
    re: *mut f64,
    im: *mut f64,
    bins: usize,
) -> AdamogeStatus {
    guard(|| {
        if x.is_null() || re.is_null() || im.is_null() {
            return Err(null("x, re or im"));
        }
        if bins != fft::half_bins(len) {
            return Err(Failure(
                AdamogeStatus::BufferSize,
                format!("{len} samples give {} bins, got {bins}", fft::half_bins(len)),
            ));
        }
        let (r, i) = fft::rfft(std::slice::from_raw_parts(x, len))?;
        std::slice::from_raw_parts_mut(re, bins).copy_from_slice(&r);
        std::slice::from_raw_parts_mut(im, bins).copy_from_slice(&i);
        Ok(())
    })
}
