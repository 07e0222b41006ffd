//! C ABI over the `mdtal` toolkit.
//!
//! Every fallible function returns an [`MdtalStatus`]; on failure a message
//! is available from [`mdtal_last_error_message`] on the same thread.
//! Strings handed out through `out_json` parameters are owned by the caller
//! and must be released with [`mdtal_string_free`]. Models are opaque
//! handles created by [`mdtal_model_load`] and released by
//! [`mdtal_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mdtal::checkpoint::{self, LoadedModel};
use mdtal::losses::{soft_boundary, soft_iou};
use mdtal::metrics::{self, Grid};
use mdtal::synthgen::{self, Example, Profile};
use mdtal::timecodec::{Segment, TimeGrid};
use mdtal::trainkit;
use mdtal::Error;
use ndarray::{Array1, Array2};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdtalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Parse = 5,
    Checkpoint = 6,
    Config = 7,
    NonFinite = 8,
    Panic = 9,
}

/// A loaded model checkpoint.
pub struct MdtalModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MdtalStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::TimestampOutOfRange { .. }
            | Error::BinOutOfRange { .. }
            | Error::StepOutOfRange { .. } => MdtalStatus::OutOfRange,
            Error::NotATimeToken(_)
            | Error::LengthMismatch { .. }
            | Error::ShapeMismatch { .. }
            | Error::UnknownGrid(_)
            | Error::MissingCache => MdtalStatus::InvalidArgument,
            Error::NonFinite(_) => MdtalStatus::NonFinite,
            Error::Config(_) => MdtalStatus::Config,
            Error::Parse { .. } | Error::Json(_) => MdtalStatus::Parse,
            Error::Checkpoint(_) => MdtalStatus::Checkpoint,
            Error::Io(_) => MdtalStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(MdtalStatus::Parse, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MdtalStatus::InvalidArgument, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Run `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MdtalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MdtalStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MdtalStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(
            MdtalStatus::NullPointer,
            format!("`{what}` is NULL"),
        ))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be NULL or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    non_null(p, what)?;
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

/// # Safety
/// `out` must be NULL or writable.
unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    non_null(out, what)?;
    unsafe { out.write(value) };
    Ok(())
}

/// # Safety
/// `out` must be NULL or writable.
unsafe fn put_json(out: *mut *mut c_char, value: &serde_json::Value) -> Result<(), Failure> {
    let text =
        CString::new(serde_json::to_string(value)?).map_err(|_| invalid("JSON contained NUL"))?;
    unsafe { put(out, text.into_raw(), "out_json") }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdtal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mdtal_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Release a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must be NULL or a pointer obtained from an `out_json` parameter that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn mdtal_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Time-token index `round((n_bins - 1) * tau / duration)`.
///
/// # Safety
/// `out_bin` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_time_encode(
    tau: f64,
    duration: f64,
    n_bins: u32,
    out_bin: *mut u32,
) -> MdtalStatus {
    guard(|| {
        let k = TimeGrid::new(n_bins as usize, duration)?.encode_timestamp(tau)?;
        unsafe { put(out_bin, k as u32, "out_bin") }
    })
}

/// Timestamp `duration * bin / (n_bins - 1)`.
///
/// # Safety
/// `out_tau` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_time_decode(
    bin: u32,
    duration: f64,
    n_bins: u32,
    out_tau: *mut f64,
) -> MdtalStatus {
    guard(|| {
        let tau = TimeGrid::new(n_bins as usize, duration)?.decode_index(bin as usize)?;
        unsafe { put(out_tau, tau, "out_tau") }
    })
}

/// Temporal IoU of `[s1, e1]` and `[s2, e2]`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_tiou(
    s1: f64,
    e1: f64,
    s2: f64,
    e2: f64,
    out: *mut f64,
) -> MdtalStatus {
    guard(|| {
        let v = metrics::tiou(&Segment::new(s1, e1)?, &Segment::new(s2, e2)?);
        unsafe { put(out, v, "out") }
    })
}

/// Normalized step weight `w_t` for `t` in `1..=n_steps`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_step_weight(t: u32, n_steps: u32, out: *mut f64) -> MdtalStatus {
    guard(|| {
        let w = mdtal::losses::step_weight(t as usize, n_steps as usize)?;
        unsafe { put(out, w, "out") }
    })
}

/// Soft IoU between the expected segment of two time-bin distributions of
/// length `n_bins` and the ground-truth bins.
///
/// # Safety
/// `p_start` and `p_end` must point to `n_bins` readable doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_soft_iou(
    p_start: *const f64,
    p_end: *const f64,
    n_bins: usize,
    gt_start: u32,
    gt_end: u32,
    out: *mut f64,
) -> MdtalStatus {
    guard(|| {
        non_null(p_start, "p_start")?;
        non_null(p_end, "p_end")?;
        if n_bins < 2 {
            return Err(invalid("n_bins must be at least 2"));
        }
        if gt_start as usize >= n_bins || gt_end as usize >= n_bins {
            return Err(Failure(
                MdtalStatus::OutOfRange,
                "ground-truth bin outside the grid".into(),
            ));
        }
        let dist = |p: *const f64, what: &str| -> Result<Array1<f64>, Failure> {
            let s = unsafe { std::slice::from_raw_parts(p, n_bins) };
            if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Failure(
                    MdtalStatus::NonFinite,
                    format!("`{what}` is not a distribution"),
                ));
            }
            Ok(Array1::from(s.to_vec()))
        };
        let bs = soft_boundary(&dist(p_start, "p_start")?);
        let be = soft_boundary(&dist(p_end, "p_end")?);
        let scale = (n_bins - 1) as f64;
        let r = soft_iou(bs, be, gt_start as f64 / scale, gt_end as f64 / scale, 1e-8);
        unsafe { put(out, r, "out") }
    })
}

/// Load a model checkpoint into a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_model_load(
    path: *const c_char,
    out_model: *mut *mut MdtalModel,
) -> MdtalStatus {
    guard(|| {
        let path = unsafe { str_arg(path, "path") }?;
        non_null(out_model, "out_model")?;
        let inner = checkpoint::load_model(Path::new(path))?;
        unsafe {
            put(
                out_model,
                Box::into_raw(Box::new(MdtalModel { inner })),
                "out_model",
            )
        }
    })
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle from [`mdtal_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdtal_model_free(model: *mut MdtalModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be NULL or a live handle.
unsafe fn model_ref<'a>(model: *const MdtalModel) -> Result<&'a MdtalModel, Failure> {
    non_null(model, "model")?;
    Ok(unsafe { &*model })
}

/// JSON object with the model architecture, task settings and training metadata.
///
/// # Safety
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_model_info(
    model: *const MdtalModel,
    out_json: *mut *mut c_char,
) -> MdtalStatus {
    guard(|| {
        let m = &unsafe { model_ref(model) }?.inner;
        let v = serde_json::json!({
            "model": m.params.config,
            "task": m.task,
            "meta": m.meta,
            "n_params": m.params.param_count(),
        });
        unsafe { put_json(out_json, &v) }
    })
}

fn decode_with_steps(
    m: &LoadedModel,
    n_steps: u32,
) -> Result<mdtal::sampler::DecodeConfig, Failure> {
    let mut cfg = m.decode_config()?;
    if n_steps > 0 {
        cfg.n_steps = n_steps as usize;
    }
    if cfg.n_steps > m.params.config.n_steps {
        return Err(Failure(
            MdtalStatus::OutOfRange,
            format!("model supports at most {} steps", m.params.config.n_steps),
        ));
    }
    Ok(cfg)
}

/// Decode one video given row-major frame features of shape
/// `n_frames x d_feat`. Writes a JSON array of detections with fields
/// `video` (empty), `class`, `start`, `end`, `score`. `n_steps = 0` uses
/// the checkpoint's decoding settings.
///
/// # Safety
/// `features` must point to `n_frames * d_feat` readable doubles;
/// `model` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_model_generate(
    model: *const MdtalModel,
    features: *const f64,
    n_frames: usize,
    d_feat: usize,
    n_steps: u32,
    out_json: *mut *mut c_char,
) -> MdtalStatus {
    guard(|| {
        let m = &unsafe { model_ref(model) }?.inner;
        non_null(features, "features")?;
        if d_feat != m.params.config.d_feat {
            return Err(invalid(format!(
                "expected d_feat {}, got {d_feat}",
                m.params.config.d_feat
            )));
        }
        let len = n_frames
            .checked_mul(d_feat)
            .ok_or_else(|| invalid("feature size overflows"))?;
        let data = unsafe { std::slice::from_raw_parts(features, len) }.to_vec();
        let frames =
            Array2::from_shape_vec((n_frames, d_feat), data).map_err(|e| invalid(e.to_string()))?;
        let decode = decode_with_steps(m, n_steps)?;
        let ctx = trainkit::video_context(&frames, &m.task, m.params.config.n_ctx)?;
        let d = trainkit::decode_video(
            &m.params,
            &ctx,
            "",
            &m.task,
            &m.task.vocabulary()?,
            &m.task.grid()?,
            &decode,
        )?;
        unsafe { put_json(out_json, &serde_json::to_value(&d.detections)?) }
    })
}

/// Decode and score every video of a dataset JSONL file. Writes a JSON
/// object with `report`, `predictions` and `dropped`.
///
/// # Safety
/// `model` must be a live handle; `dataset_path` a NUL-terminated string;
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_model_evaluate(
    model: *const MdtalModel,
    dataset_path: *const c_char,
    n_steps: u32,
    out_json: *mut *mut c_char,
) -> MdtalStatus {
    guard(|| {
        let m = &unsafe { model_ref(model) }?.inner;
        let path = unsafe { str_arg(dataset_path, "dataset_path") }?;
        let decode = decode_with_steps(m, n_steps)?;
        let examples = synthgen::read_dataset(Path::new(path))?;
        let data = trainkit::prepare(&examples, &m.task, m.params.config.n_ctx)?;
        let ev = trainkit::evaluate(&m.params, &data, &m.task, &decode, Grid::Thumos)?;
        let v = serde_json::json!({
            "report": ev.report,
            "predictions": ev.predictions,
            "dropped": ev.dropped,
        });
        unsafe { put_json(out_json, &v) }
    })
}

/// Score a detection JSONL file against the ground truth of a dataset
/// JSONL file. `profile` is `"rtl"` or `"closed-set"`, `grid` is
/// `"thumos"` or `"anet"` (used for closed-set only).
///
/// # Safety
/// All string arguments must be NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn mdtal_eval_jsonl(
    predictions_path: *const c_char,
    dataset_path: *const c_char,
    profile: *const c_char,
    grid: *const c_char,
    out_json: *mut *mut c_char,
) -> MdtalStatus {
    guard(|| {
        let pred = unsafe { str_arg(predictions_path, "predictions_path") }?;
        let data = unsafe { str_arg(dataset_path, "dataset_path") }?;
        let profile: Profile = unsafe { str_arg(profile, "profile") }?.parse()?;
        let grid: Grid = unsafe { str_arg(grid, "grid") }?.parse()?;
        let preds = metrics::read_detections(Path::new(pred))?;
        let gts: Vec<_> = synthgen::read_dataset(Path::new(data))?
            .iter()
            .flat_map(Example::ground_truth)
            .collect();
        let report = trainkit::score(&preds, &gts, profile, grid);
        unsafe { put_json(out_json, &serde_json::to_value(&report)?) }
    })
}
