//! C ABI for the reverb toolkit.
//!
//! Every function returns a [`ReverbStatus`]; on failure the message is
//! available from [`reverb_last_error`] on the same thread. Arrays are
//! row-major `double` buffers whose sizes the caller passes explicitly.
//! Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use ndarray::{Array2, Array3, ArrayView2};
use reverb::config::RunConfig;
use reverb::curves::curve_non;
use reverb::data::{preprocess, to_world, Sample};
use reverb::metrics::min_ade_fde;
use reverb::model::{Noise, RevModel};
use reverb::train::load_checkpoint_into;
use reverb::transforms::{forward_array, inverse_array, TransformKind};
use reverb::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    Io = 6,
    Checkpoint = 7,
    Numeric = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReverbTransform {
    None = 0,
    Dft = 1,
    Db2 = 2,
    Haar = 3,
}

impl From<ReverbTransform> for TransformKind {
    fn from(t: ReverbTransform) -> Self {
        match t {
            ReverbTransform::None => TransformKind::None,
            ReverbTransform::Dft => TransformKind::Dft,
            ReverbTransform::Db2 => TransformKind::Db2,
            ReverbTransform::Haar => TransformKind::Haar,
        }
    }
}

/// A loaded model. Opaque to C.
pub struct ReverbModel {
    model: RevModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ReverbStatus {
    match e {
        Error::Shape(_) | Error::OddLength { .. } | Error::Contract { .. } => ReverbStatus::Shape,
        Error::Config(_) => ReverbStatus::Config,
        Error::Io { .. } => ReverbStatus::Io,
        Error::Checkpoint(_) | Error::CheckpointMismatch(_) => ReverbStatus::Checkpoint,
        Error::Numeric { .. } | Error::Domain(_) => ReverbStatus::Numeric,
        _ => ReverbStatus::Data,
    }
}

struct Fail(ReverbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ReverbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ReverbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ReverbStatus::Panic
        }
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(ReverbStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `p` must be null or point to `len` readable doubles.
unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail(ReverbStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable doubles.
unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail(ReverbStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn view(data: &[f64], rows: usize, cols: usize) -> Result<ArrayView2<'_, f64>, Fail> {
    ArrayView2::from_shape((rows, cols), data).map_err(|e| invalid(e.to_string()))
}

fn copy_out(src: impl IntoIterator<Item = f64>, dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s;
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn reverb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forward transform of a `(t, m)` sequence. `out` receives `t * m` values:
/// `t / channels` rows of `m * channels` columns.
///
/// # Safety
/// `x` and `out` must point to `t * m` doubles.
#[no_mangle]
pub unsafe extern "C" fn reverb_transform_forward(
    kind: ReverbTransform,
    x: *const f64,
    t: usize,
    m: usize,
    out: *mut f64,
) -> ReverbStatus {
    guard(|| {
        let x = view(input(x, t * m, "x")?, t, m)?;
        let spec = forward_array(x, kind.into())?;
        copy_out(spec.iter().copied(), output(out, t * m, "out")?);
        Ok(())
    })
}

/// Inverse of [`reverb_transform_forward`]; `t` is the time-domain length.
///
/// # Safety
/// `spec` and `out` must point to `t * m` doubles.
#[no_mangle]
pub unsafe extern "C" fn reverb_transform_inverse(
    kind: ReverbTransform,
    spec: *const f64,
    t: usize,
    m: usize,
    out: *mut f64,
) -> ReverbStatus {
    guard(|| {
        let kind = TransformKind::from(kind);
        let rows = kind.spectral_len(t)?;
        let spec = view(input(spec, t * m, "spec")?, rows, kind.spectral_dims(m))?;
        let x = inverse_array(spec, kind)?;
        copy_out(x.iter().copied(), output(out, t * m, "out")?);
        Ok(())
    })
}

/// minADE/minFDE of `k` hypotheses `(k, t_f, m)` against `gt` `(t_f, m)`.
///
/// # Safety
/// Buffers must hold the stated number of doubles; `ade` and `fde` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn reverb_min_ade_fde(
    preds: *const f64,
    k: usize,
    t_f: usize,
    m: usize,
    gt: *const f64,
    ade: *mut f64,
    fde: *mut f64,
) -> ReverbStatus {
    guard(|| {
        let p = input(preds, k * t_f * m, "preds")?;
        let preds = Array3::from_shape_vec((k, t_f, m), p.to_vec()).map_err(|e| invalid(e.to_string()))?;
        let gt = view(input(gt, t_f * m, "gt")?, t_f, m)?;
        let (a, f) = min_ade_fde(&preds, gt)?;
        copy_out([a], output(ade, 1, "ade")?);
        copy_out([f], output(fde, 1, "fde")?);
        Ok(())
    })
}

/// Normalized reverberation curve of a `(t_p, t_f)` kernel into `out`.
///
/// # Safety
/// `r` and `out` must point to `t_p * t_f` doubles.
#[no_mangle]
pub unsafe extern "C" fn reverb_curve_non(r: *const f64, t_p: usize, t_f: usize, out: *mut f64) -> ReverbStatus {
    guard(|| {
        let r = view(input(r, t_p * t_f, "r")?, t_p, t_f)?;
        copy_out(curve_non(r).values.iter().copied(), output(out, t_p * t_f, "out")?);
        Ok(())
    })
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail(ReverbStatus::NullPointer, format!("{what} is null")));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

/// Loads a model from a run configuration and a checkpoint stem. A null
/// `config` uses the default model. On success `*out` owns the model; free
/// it with [`reverb_model_free`].
///
/// # Safety
/// `config` must be null or a NUL-terminated string; `checkpoint` must be a
/// NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn reverb_model_load(
    config: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut ReverbModel,
) -> ReverbStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail(ReverbStatus::NullPointer, "out is null".into()));
        }
        *out = ptr::null_mut();
        let cfg = if config.is_null() { RunConfig::default() } else { RunConfig::load(path_arg(config, "config")?)? };
        let mut model = RevModel::new(cfg.model.clone(), cfg.seed)?;
        load_checkpoint_into(&mut model, path_arg(checkpoint, "checkpoint")?)?;
        *out = Box::into_raw(Box::new(ReverbModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a pointer from [`reverb_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn reverb_model_free(model: *mut ReverbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// History length, horizon and hypothesis count of a loaded model.
///
/// # Safety
/// `model` must be live; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn reverb_model_dims(
    model: *const ReverbModel,
    t_h: *mut usize,
    t_f: *mut usize,
    k_g: *mut usize,
) -> ReverbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Fail(ReverbStatus::NullPointer, "model is null".into()))?;
        for (p, v) in [(t_h, m.model.config.t_h), (t_f, m.model.config.t_f), (k_g, m.model.config.k_g)] {
            if p.is_null() {
                return Err(Fail(ReverbStatus::NullPointer, "dimension output is null".into()));
            }
            *p = v;
        }
        Ok(())
    })
}

/// Predicts `k_g` futures in world coordinates. `ego` is `(t_h, 2)`,
/// `neighbors` is `n` consecutive `(t_h, 2)` tracks (may be null when
/// `n == 0`), and `out` receives `(k_g, t_f, 2)` values.
///
/// # Safety
/// `model` must be live and buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn reverb_model_predict(
    model: *const ReverbModel,
    ego: *const f64,
    neighbors: *const f64,
    n: usize,
    out: *mut f64,
) -> ReverbStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| Fail(ReverbStatus::NullPointer, "model is null".into()))?.model;
        let (t_h, t_f, k_g) = (m.config.t_h, m.config.t_f, m.config.k_g);
        let ego = view(input(ego, t_h * 2, "ego")?, t_h, 2)?.to_owned();
        let nbrs: Vec<Array2<f64>> = if n == 0 {
            Vec::new()
        } else {
            input(neighbors, n * t_h * 2, "neighbors")?
                .chunks(t_h * 2)
                .map(|c| Array2::from_shape_vec((t_h, 2), c.to_vec()).expect("chunk size"))
                .collect()
        };
        let sample = preprocess(&Sample {
            scene: String::new(),
            agent: 0,
            frame: 0,
            ego,
            neighbors: nbrs,
            gt: Array2::zeros((t_f, 2)),
            origin: [0.0, 0.0],
        });
        let prep = m.prepare(sample.ego.view(), &sample.neighbors, None)?;
        let pred = m.predict(&prep, &Noise::zeros(&m.config))?;
        let dst = output(out, k_g * t_f * 2, "out")?;
        for k in 0..k_g {
            let world = to_world(&pred.values.index_axis(ndarray::Axis(0), k).to_owned(), sample.origin);
            copy_out(world.iter().copied(), &mut dst[k * t_f * 2..(k + 1) * t_f * 2]);
        }
        Ok(())
    })
}
