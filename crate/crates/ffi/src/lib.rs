//! C ABI over `partseg`.
//!
//! Models and shapes are opaque handles created and destroyed by the
//! library. Every fallible call returns a [`PsStatus`]; on failure a message
//! for the calling thread is available from [`ps_last_error`]. Output arrays
//! are caller-allocated, with their capacity passed in elements.
//!
//! Shapes cache their encoder features for the last model they were
//! segmented with. A handle may be shared between threads only for reading
//! (segmenting takes `&mut` on the shape).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};

use partseg::data::{annotate, generate_synthetic_shape, AnnotatedCloud, Stage, SynthConfig};
use partseg::geometry::{normalize_unit_sphere, PartLabelMap, Point3};
use partseg::inference::{full_segment_from_predictions, FullSegConfig, DEFAULT_PROPAGATION_ROUNDS};
use partseg::model::SegModel;
use partseg::nn::Tensor;
use partseg::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotFound = 3,
    BadFormat = 4,
    InvalidPrompt = 5,
    InvalidScale = 6,
    BufferTooSmall = 7,
    Io = 8,
    Internal = 9,
}

/// A loaded segmentation model.
pub struct PsModel {
    id: u64,
    model: SegModel,
}

/// A point cloud normalised to the unit sphere, with optional part labels.
pub struct PsShape {
    cloud: AnnotatedCloud,
    features: Option<(u64, Tensor)>,
}

static NEXT_MODEL: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(PsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => PsStatus::NotFound,
            Error::Io(_) => PsStatus::Io,
            Error::InvalidPrompt(_) => PsStatus::InvalidPrompt,
            Error::Format(_) => PsStatus::BadFormat,
            Error::Validation(_) | Error::Shape(_) => PsStatus::InvalidArgument,
            _ => PsStatus::Internal,
        };
        Fail(status, e.to_string())
    }
}

fn fail(status: PsStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, recording the error message and turning panics into
/// [`PsStatus::Internal`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PsStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(PsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn output<'a, T>(ptr: *mut T, cap: usize, need: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if cap < need {
        return Err(fail(PsStatus::BufferTooSmall, format!("{what} holds {cap} elements, {need} needed")));
    }
    if need > 0 && ptr.is_null() {
        return Err(fail(PsStatus::NullPointer, format!("{what} is null")));
    }
    Ok(if need == 0 { &mut [] } else { std::slice::from_raw_parts_mut(ptr, need) })
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(fail(PsStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn check_unit(v: f32, status: PsStatus, what: &str) -> Result<(), Fail> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(fail(status, format!("{what} {v} outside [0, 1]")))
    }
}

/// Message of the last failed call on this thread ("" after a success).
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model bundle from `path` (UTF-8, NUL-terminated).
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guard(|| {
        if path.is_null() {
            return Err(fail(PsStatus::NullPointer, "path is null"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| fail(PsStatus::InvalidArgument, "path is not UTF-8"))?;
        let model = SegModel::load(p)?;
        store(out, PsModel { id: NEXT_MODEL.fetch_add(1, Ordering::SeqCst), model })
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`ps_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Creates a shape from `n` interleaved xyz coordinates, normalised to the
/// unit sphere. `labels` may be null; otherwise it holds `n` part ids, which
/// are renumbered to `0..K` in order of first appearance.
///
/// # Safety
/// `xyz` must hold `3 n` floats, `labels` (if non-null) `n` values.
#[no_mangle]
pub unsafe extern "C" fn ps_shape_new(xyz: *const f32, n: usize, labels: *const u32, out: *mut *mut PsShape) -> PsStatus {
    guard(|| {
        if n == 0 {
            return Err(fail(PsStatus::InvalidArgument, "a shape needs at least one point"));
        }
        let flat = slice(xyz, 3 * n, "xyz")?;
        let coords: Vec<Point3> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let points = normalize_unit_sphere(&coords)?;
        let labels = if labels.is_null() { None } else { Some(PartLabelMap::compact(slice(labels, n, "labels")?)) };
        store(out, PsShape { cloud: AnnotatedCloud { id: 0, points, labels, stage: Stage::Raw }, features: None })
    })
}

/// Generates a labelled synthetic shape with `parts` parts (0 picks the
/// generator's default range) sampled at `points` points.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_shape_synthetic(seed: u64, parts: usize, points: usize, out: *mut *mut PsShape) -> PsStatus {
    guard(|| {
        if points == 0 {
            return Err(fail(PsStatus::InvalidArgument, "points must be positive"));
        }
        let mut cfg = SynthConfig::default();
        if parts > 0 {
            cfg.min_parts = parts;
            cfg.max_parts = parts;
        }
        let cloud = annotate(&generate_synthetic_shape(seed, &cfg)?, points, seed)?;
        store(out, PsShape { cloud, features: None })
    })
}

/// Releases a shape; null is ignored.
///
/// # Safety
/// `shape` must come from a `ps_shape_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ps_shape_free(shape: *mut PsShape) {
    if !shape.is_null() {
        drop(Box::from_raw(shape));
    }
}

/// Number of points; 0 for a null handle.
///
/// # Safety
/// `shape` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_shape_len(shape: *const PsShape) -> usize {
    shape.as_ref().map_or(0, |s| s.cloud.len())
}

/// Number of labelled parts; 0 when unlabelled or null.
///
/// # Safety
/// `shape` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_shape_part_count(shape: *const PsShape) -> usize {
    shape.as_ref().map_or(0, |s| s.cloud.part_count())
}

/// Copies the normalised coordinates (`3 n` floats).
///
/// # Safety
/// `shape` must be a live handle and `out` hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn ps_shape_points(shape: *const PsShape, out: *mut f32, cap: usize) -> PsStatus {
    guard(|| {
        let s = shape.as_ref().ok_or_else(|| fail(PsStatus::NullPointer, "shape is null"))?;
        let dst = output(out, cap, 3 * s.cloud.len(), "out")?;
        for (d, p) in dst.chunks_exact_mut(3).zip(s.cloud.points.coords()) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Copies the part labels (`n` values); [`PsStatus::NotFound`] when unlabelled.
///
/// # Safety
/// `shape` must be a live handle and `out` hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ps_shape_labels(shape: *const PsShape, out: *mut u32, cap: usize) -> PsStatus {
    guard(|| {
        let s = shape.as_ref().ok_or_else(|| fail(PsStatus::NullPointer, "shape is null"))?;
        let labels = s.cloud.labels.as_ref().ok_or_else(|| fail(PsStatus::NotFound, "shape has no labels"))?;
        output(out, cap, s.cloud.len(), "out")?.copy_from_slice(labels.labels());
        Ok(())
    })
}

impl PsShape {
    fn features(&mut self, model: &PsModel) -> Result<(&AnnotatedCloud, &Tensor), Fail> {
        if self.features.as_ref().is_none_or(|(id, _)| *id != model.id) {
            self.features = Some((model.id, model.model.features(&self.cloud.points)?));
        }
        Ok((&self.cloud, &self.features.as_ref().expect("set above").1))
    }
}

/// Interactive segmentation: per-point probabilities for the part under
/// point `prompt`. `scale` may be null (no scale prompt) or point to a value
/// in `[0, 1]`. `probs` receives `n` floats; `mask` (nullable) receives `n`
/// bytes, 1 where the probability is at least `threshold`.
///
/// # Safety
/// Handles must be live; `probs` must hold `probs_cap` floats and `mask`
/// (if non-null) `mask_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn ps_segment(
    model: *const PsModel,
    shape: *mut PsShape,
    prompt: usize,
    scale: *const f32,
    threshold: f32,
    probs: *mut f32,
    probs_cap: usize,
    mask: *mut u8,
    mask_cap: usize,
) -> PsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(PsStatus::NullPointer, "model is null"))?;
        let s = shape.as_mut().ok_or_else(|| fail(PsStatus::NullPointer, "shape is null"))?;
        let n = s.cloud.len();
        if prompt >= n {
            return Err(fail(PsStatus::InvalidPrompt, format!("prompt {prompt} out of range for {n} points")));
        }
        let scale = scale.as_ref().copied();
        if let Some(v) = scale {
            check_unit(v, PsStatus::InvalidScale, "scale")?;
        }
        check_unit(threshold, PsStatus::InvalidArgument, "threshold")?;
        let p_out = output(probs, probs_cap, n, "probs")?;
        let m_out = if mask.is_null() { None } else { Some(output(mask, mask_cap, n, "mask")?) };
        let (cloud, f) = s.features(m)?;
        let p = m.model.decode(f, &cloud.points, prompt, scale)?;
        p_out.copy_from_slice(&p);
        if let Some(dst) = m_out {
            dst.iter_mut().zip(&p).for_each(|(d, &v)| *d = (v >= threshold) as u8);
        }
        Ok(())
    })
}

/// Full segmentation from `count` point prompts (`scales` nullable, else
/// `count` values in `[0, 1]`): one mask per prompt at threshold `theta`,
/// overlaps resolved with weight `alpha_conf`, gaps filled by `k`-NN
/// propagation. `labels` receives `n` prompt indices.
///
/// # Safety
/// Handles must be live; `prompts` must hold `count` values, `scales` (if
/// non-null) `count` floats and `labels` `labels_cap` values.
#[no_mangle]
pub unsafe extern "C" fn ps_full_segment(
    model: *const PsModel,
    shape: *mut PsShape,
    prompts: *const usize,
    scales: *const f32,
    count: usize,
    theta: f32,
    alpha_conf: f32,
    k: usize,
    labels: *mut u32,
    labels_cap: usize,
) -> PsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| fail(PsStatus::NullPointer, "model is null"))?;
        let s = shape.as_mut().ok_or_else(|| fail(PsStatus::NullPointer, "shape is null"))?;
        if count == 0 {
            return Err(fail(PsStatus::InvalidArgument, "at least one prompt is required"));
        }
        let n = s.cloud.len();
        let idx = slice(prompts, count, "prompts")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(fail(PsStatus::InvalidPrompt, format!("prompt {bad} out of range for {n} points")));
        }
        let sc = if scales.is_null() { None } else { Some(slice(scales, count, "scales")?) };
        if let Some(v) = sc.and_then(|v| v.iter().find(|v| !(0.0..=1.0).contains(*v))) {
            return Err(fail(PsStatus::InvalidScale, format!("scale {v} outside [0, 1]")));
        }
        check_unit(theta, PsStatus::InvalidArgument, "theta")?;
        check_unit(alpha_conf, PsStatus::InvalidArgument, "alpha_conf")?;
        if k == 0 {
            return Err(fail(PsStatus::InvalidArgument, "k must be positive"));
        }
        let out = output(labels, labels_cap, n, "labels")?;
        let (cloud, f) = s.features(m)?;
        let confidences = idx
            .iter()
            .enumerate()
            .map(|(j, &i)| m.model.decode(f, &cloud.points, i, sc.map(|v| v[j])))
            .collect::<partseg::Result<Vec<_>>>()?;
        let cfg = FullSegConfig { theta, alpha_conf, k, rounds: DEFAULT_PROPAGATION_ROUNDS };
        let res = full_segment_from_predictions(&cloud.points, confidences, &cfg)?;
        out.copy_from_slice(&res.labels);
        Ok(())
    })
}
