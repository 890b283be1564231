//! C ABI over the `maskts` calibration toolkit.
//!
//! Every fallible function returns an [`MtsStatus`]. On failure the message
//! of the last error on the calling thread is available from
//! [`mts_last_error_message`]. Models are opaque handles created by
//! [`mts_model_load`] and released with [`mts_model_free`]. Arrays are flat,
//! row-major and owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use maskts::calib::{BinaryMask, LogitMap};
use maskts::io::checkpoint::load_checkpoint;
use maskts::net::{self, MaskTsModel};
use maskts::record::CalibRecord;
use maskts::tensor::Tensor;
use maskts::{metrics, ts, Error};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtsStatus {
    Ok = 0,
    /// Bad shapes, out-of-range values or degenerate inputs.
    Contract = 1,
    /// Malformed file contents.
    Format = 2,
    Io = 3,
    NullPointer = 4,
    /// A Rust panic was caught at the boundary.
    Panic = 5,
}

/// Opaque calibration model.
pub struct MtsModel {
    model: MaskTsModel,
    use_mask_ts: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> MtsStatus {
    match e {
        Error::Format { .. } | Error::Json(_) => MtsStatus::Format,
        Error::Io { .. } => MtsStatus::Io,
        _ => MtsStatus::Contract,
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), MtsStatus>) -> MtsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MtsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            MtsStatus::Panic
        }
    }
}

fn fail(e: Error) -> MtsStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> MtsStatus {
    set_error(format!("`{what}` is null"));
    MtsStatus::NullPointer
}

unsafe fn input<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], MtsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn output<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], MtsStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, n))
}

unsafe fn out_scalar<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, MtsStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn mts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `maskts train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mts_model_load(path: *const c_char, out: *mut *mut MtsModel) -> MtsStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let out = out_scalar(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(Error::Contract("path is not UTF-8".into())))?;
        let (model, cfg) = load_checkpoint(path).map_err(fail)?;
        *out = Box::into_raw(Box::new(MtsModel {
            model,
            use_mask_ts: cfg.use_mask_ts,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`mts_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mts_model_free(model: *mut MtsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Global temperature stored in the model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mts_model_t0(model: *const MtsModel, out: *mut f32) -> MtsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_scalar(out, "out")? = m.model.t0();
        Ok(())
    })
}

/// Calibrates one `height × width` record. `image` and `logits` are inputs;
/// `probability` and `temperature` receive `height · width` values each.
/// `temperature` may be null. Composition with the global temperature on
/// predicted background follows the checkpoint unless `use_mask_ts` is 0.
///
/// # Safety
/// Array pointers must reference `height · width` valid elements.
#[no_mangle]
pub unsafe extern "C" fn mts_model_calibrate(
    model: *const MtsModel,
    image: *const f32,
    logits: *const f32,
    height: usize,
    width: usize,
    use_mask_ts: i32,
    probability: *mut f32,
    temperature: *mut f32,
) -> MtsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or_else(|| fail(Error::Contract(format!("invalid size {height}×{width}"))))?;
        let image = input(image, n, "image")?;
        let logits = input(logits, n, "logits")?;
        let prob_out = output(probability, n, "probability")?;
        let record = (|| {
            CalibRecord::new(
                "ffi",
                Tensor::plane(height, width, image.to_vec())?,
                LogitMap::from_plane(height, width, logits.to_vec())?,
                BinaryMask::all(height, width, false),
            )
        })()
        .map_err(fail)?;
        let compose = m.use_mask_ts && use_mask_ts != 0;
        let cal = net::calibrate(&m.model, &record, m.model.t0(), compose).map_err(fail)?;
        prob_out.copy_from_slice(cal.probability.values());
        if !temperature.is_null() {
            let t_out = output(temperature, n, "temperature")?;
            for (i, t) in t_out.iter_mut().enumerate() {
                *t = cal.temperature.at(i);
            }
        }
        Ok(())
    })
}

/// Fits a global temperature to `n` logits and 0/1 labels.
///
/// # Safety
/// `logits` and `labels` must reference `n` elements; `out_t0` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mts_fit_temperature(
    logits: *const f32,
    labels: *const f32,
    n: usize,
    out_t0: *mut f32,
) -> MtsStatus {
    guard(|| {
        let z = input(logits, n, "logits")?;
        let y = input(labels, n, "labels")?;
        let out = out_scalar(out_t0, "out_t0")?;
        let fit = ts::TsObjective::new(vec![(z, y)]).map_err(fail)?.fit();
        *out = fit.t0;
        Ok(())
    })
}

/// `σ(z / t0)` for `n` logits.
///
/// # Safety
/// `logits` and `probability` must reference `n` elements.
#[no_mangle]
pub unsafe extern "C" fn mts_apply_temperature(
    logits: *const f32,
    n: usize,
    t0: f32,
    probability: *mut f32,
) -> MtsStatus {
    guard(|| {
        let z = input(logits, n, "logits")?;
        let p = output(probability, n, "probability")?;
        if !(maskts::calib::T_MIN..=maskts::calib::T_MAX).contains(&t0) {
            return Err(fail(Error::Contract(format!("temperature {t0} out of range"))));
        }
        for (o, &zv) in p.iter_mut().zip(z) {
            *o = maskts::calib::scaled_sigmoid(zv, t0);
        }
        Ok(())
    })
}

/// Which binned calibration error to compute.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MtsMetric {
    /// Expected calibration error of confidences.
    Ece = 0,
    /// Maximum calibration error of confidences.
    Mce = 1,
    /// Static calibration error of positive-class probabilities.
    Sce = 2,
    /// Adaptive calibration error of positive-class probabilities.
    Ace = 3,
}

/// Computes `metric` in percent over `n` samples with `bins` bins. For ECE
/// and MCE `scores` are confidences and `outcomes` mark correct predictions;
/// for SCE and ACE `scores` are positive-class probabilities and `outcomes`
/// are labels. Nonzero outcome bytes count as true.
///
/// # Safety
/// `scores` and `outcomes` must reference `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mts_metric(
    metric: MtsMetric,
    scores: *const f32,
    outcomes: *const u8,
    n: usize,
    bins: usize,
    out: *mut f64,
) -> MtsStatus {
    guard(|| {
        let s = input(scores, n, "scores")?;
        let o: Vec<bool> = input(outcomes, n, "outcomes")?.iter().map(|&b| b != 0).collect();
        let out = out_scalar(out, "out")?;
        let f = match metric {
            MtsMetric::Ece => metrics::ece,
            MtsMetric::Mce => metrics::mce,
            MtsMetric::Sce => metrics::sce,
            MtsMetric::Ace => metrics::ace,
        };
        *out = f(s, &o, bins).map_err(fail)?;
        Ok(())
    })
}
