//! C interface to the bgcrack segmentation model.
//!
//! Every function returns a [`BgcStatus`]; on failure the message is kept
//! per thread and can be read with [`bgc_last_error_message`]. Models are
//! opaque heap handles released with [`bgc_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bgcrack::infer::predict_image;
use bgcrack::metrics::{mi_dice, mi_iou, METRIC_EPS};
use bgcrack::{checkpoint, Ablation, BgCrack, Error, ModelConfig, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BgcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Geometry = 4,
    Config = 5,
    Checkpoint = 6,
    Io = 7,
    Internal = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct BgcModel {
    inner: BgCrack,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BgcStatus {
    match e {
        Error::Shape(_) => BgcStatus::Shape,
        Error::Geometry(_) => BgcStatus::Geometry,
        Error::InvalidArgument(_) => BgcStatus::InvalidArgument,
        Error::Config(_) => BgcStatus::Config,
        Error::Checkpoint(_) => BgcStatus::Checkpoint,
        Error::Io(_) | Error::Image(_) => BgcStatus::Io,
        _ => BgcStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BgcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BgcStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            BgcStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(msg);
            BgcStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            BgcStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const BgcModel) -> Result<&'a BgCrack, Fail> {
    m.as_ref().map(|m| &m.inner).ok_or(Fail::Null("model"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Fail::Arg("path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

fn store(out: *mut *mut BgcModel, model: BgCrack) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    unsafe { *out = Box::into_raw(Box::new(BgcModel { inner: model })) };
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn bgc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Freshly initialised model with default widths.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn bgc_model_new(no_edge: bool, seed: u64, out: *mut *mut BgcModel) -> BgcStatus {
    guard(|| {
        let cfg = ModelConfig {
            ablation: Ablation { no_edge, ..Default::default() },
            ..Default::default()
        };
        store(out, BgCrack::new(cfg, seed)?)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bgc_model_load(path: *const c_char, out: *mut *mut BgcModel) -> BgcStatus {
    guard(|| store(out, checkpoint::load(path_arg(path)?)?))
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bgc_model_save(model: *const BgcModel, path: *const c_char) -> BgcStatus {
    guard(|| Ok(checkpoint::save(model_ref(model)?, path_arg(path)?)?))
}

/// Release a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bgc_model_free(model: *mut BgcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bgc_model_num_params(model: *const BgcModel, out: *mut u64) -> BgcStatus {
    guard(|| {
        let n = model_ref(model)?.num_params() as u64;
        *out.as_mut().ok_or(Fail::Null("out"))? = n;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bgc_model_has_edge(model: *const BgcModel, out: *mut bool) -> BgcStatus {
    guard(|| {
        let e = model_ref(model)?.config.uses_edge();
        *out.as_mut().ok_or(Fail::Null("out"))? = e;
        Ok(())
    })
}

/// Crack body and edge probabilities for an interleaved 8-bit RGB image of
/// `height × width` pixels. Outputs are row-major `height × width` maps;
/// `out_edge` may be NULL and is zero-filled for edge-ablated models.
///
/// # Safety
/// `rgb` must hold `3·height·width` bytes, `out_body` (and `out_edge` when
/// not NULL) `height·width` floats.
#[no_mangle]
pub unsafe extern "C" fn bgc_model_predict(
    model: *const BgcModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    out_body: *mut f32,
    out_edge: *mut f32,
) -> BgcStatus {
    guard(|| {
        let m = model_ref(model)?;
        if rgb.is_null() {
            return Err(Fail::Null("rgb"));
        }
        if out_body.is_null() {
            return Err(Fail::Null("out_body"));
        }
        if height == 0 || width == 0 {
            return Err(Fail::Arg(format!("empty image {height}x{width}")));
        }
        let hw = height * width;
        let px = std::slice::from_raw_parts(rgb, 3 * hw);
        let img = Tensor::from_fn(&[3, height, width], |i| {
            let (c, p) = (i / hw, i % hw);
            px[p * 3 + c] as f64 / 255.0
        });
        let pred = predict_image(m, &img)?;
        let body = std::slice::from_raw_parts_mut(out_body, hw);
        for (o, v) in body.iter_mut().zip(pred.p_b.data()) {
            *o = *v as f32;
        }
        if !out_edge.is_null() {
            let edge = std::slice::from_raw_parts_mut(out_edge, hw);
            match &pred.p_e {
                Some(p) => edge.iter_mut().zip(p.data()).for_each(|(o, v)| *o = *v as f32),
                None => edge.fill(0.0),
            }
        }
        Ok(())
    })
}

unsafe fn metric_inputs(
    preds: *const f32,
    gts: *const u8,
    n: usize,
    height: usize,
    width: usize,
) -> Result<(Vec<Tensor>, Vec<Tensor>), Fail> {
    if preds.is_null() || gts.is_null() {
        return Err(Fail::Null("preds/gts"));
    }
    let hw = height * width;
    let (p, g) = (std::slice::from_raw_parts(preds, n * hw), std::slice::from_raw_parts(gts, n * hw));
    let mut ps = Vec::with_capacity(n);
    let mut gs = Vec::with_capacity(n);
    for i in 0..n {
        let gi = &g[i * hw..(i + 1) * hw];
        if gi.iter().any(|&v| v > 1) {
            return Err(Fail::Arg("ground truth must be 0/1".into()));
        }
        ps.push(Tensor::new(&[height, width], p[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).collect())?);
        gs.push(Tensor::new(&[height, width], gi.iter().map(|&v| v as f64).collect())?);
    }
    Ok((ps, gs))
}

/// Mean per-image IoU of `n` probability maps thresholded at 0.5 against
/// 0/1 ground truth.
///
/// # Safety
/// `preds` and `gts` must each hold `n·height·width` elements.
#[no_mangle]
pub unsafe extern "C" fn bgc_mi_iou(
    preds: *const f32,
    gts: *const u8,
    n: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> BgcStatus {
    guard(|| {
        let (p, g) = metric_inputs(preds, gts, n, height, width)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = mi_iou(&p, &g, METRIC_EPS)?;
        Ok(())
    })
}

/// Mean per-image continuous Dice.
///
/// # Safety
/// As for [`bgc_mi_iou`].
#[no_mangle]
pub unsafe extern "C" fn bgc_mi_dice(
    preds: *const f32,
    gts: *const u8,
    n: usize,
    height: usize,
    width: usize,
    out: *mut f64,
) -> BgcStatus {
    guard(|| {
        let (p, g) = metric_inputs(preds, gts, n, height, width)?;
        *out.as_mut().ok_or(Fail::Null("out"))? = mi_dice(&p, &g, METRIC_EPS)?;
        Ok(())
    })
}
