//! Image-wise segmentation metrics and efficiency accounting.

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{shape_err, Error, Result};
use crate::model::BgCrack;
use crate::nn::{ParamStore, Session};
use crate::tensor::Tensor;

pub const METRIC_EPS: f64 = 1e-6;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// How MACs are counted; echoed into every profile report.
pub const MAC_RULES: &str = "conv: k^2*C_in*C_out*H_out*W_out/groups; transposed conv: k^2*C_in*C_out*H_in*W_in; \
linear: in*out per row; attention: both batched matmuls (N^2*d per head group); \
elementwise ops, norms, activations, resizes and FFTs are not counted";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mi_iou: f64,
    pub mi_dice: f64,
    pub n_images: usize,
    pub params: usize,
    pub macs: u64,
}

/// 1 where `p ≥ t`, else 0.
pub fn threshold_classify(p: &Tensor, t: f64) -> Tensor {
    p.map(|v| if v >= t { 1.0 } else { 0.0 })
}

pub fn confusion_counts(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(shape_err!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, g == 1.0) {
            _ if !(p == 0.0 || p == 1.0) || !(g == 0.0 || g == 1.0) => {
                return Err(Error::InvalidArgument("confusion counts need binary maps".into()))
            }
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn check_lists(preds: &[Tensor], gts: &[Tensor]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one image".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} ground truths", preds.len(), gts.len())));
    }
    Ok(())
}

/// IoU of one image after thresholding at 0.5.
pub fn image_iou(p: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    let c = confusion_counts(&threshold_classify(p, DEFAULT_THRESHOLD), g)?;
    Ok((c.tp as f64 + eps) / ((c.fn_ + c.fp + c.tp) as f64 + eps))
}

/// Continuous Dice of one image.
pub fn image_dice(p: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    if p.shape() != g.shape() {
        return Err(shape_err!("prediction {:?} vs ground truth {:?}", p.shape(), g.shape()));
    }
    let inter: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a * b).abs()).sum();
    let sp: f64 = p.data().iter().map(|v| v.abs()).sum();
    let sg: f64 = g.data().iter().map(|v| v.abs()).sum();
    Ok((2.0 * inter + eps) / (sp + sg + eps))
}

pub fn mi_iou(preds: &[Tensor], gts: &[Tensor], eps: f64) -> Result<f64> {
    check_lists(preds, gts)?;
    let mut s = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        s += image_iou(p, g, eps)?;
    }
    Ok(s / preds.len() as f64)
}

pub fn mi_dice(preds: &[Tensor], gts: &[Tensor], eps: f64) -> Result<f64> {
    check_lists(preds, gts)?;
    let mut s = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        s += image_dice(p, g, eps)?;
    }
    Ok(s / preds.len() as f64)
}

/// Element count of all learnable arrays (batch-norm running stats excluded).
pub fn count_params(store: &ParamStore) -> usize {
    store.num_params()
}

/// MACs of one forward pass on a single `3 × h × w` image.
pub fn count_macs(model: &BgCrack, h: usize, w: usize) -> Result<u64> {
    let s = Session::new(&model.store, Graph::dry_run(), false);
    let x = s.graph().constant(Tensor::zeros(&[1, 3, h, w]));
    model.forward(&s, &x)?;
    Ok(s.graph().macs())
}

/// Convolution-only MACs of one forward pass; these scale exactly with image area.
pub fn count_conv_macs(model: &BgCrack, h: usize, w: usize) -> Result<u64> {
    let s = Session::new(&model.store, Graph::dry_run(), false);
    let x = s.graph().constant(Tensor::zeros(&[1, 3, h, w]));
    model.forward(&s, &x)?;
    Ok(s.graph().conv_macs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub params: usize,
    pub macs: u64,
    pub height: usize,
    pub width: usize,
    pub note: String,
}

pub fn profile(model: &BgCrack, h: usize, w: usize) -> Result<ProfileReport> {
    Ok(ProfileReport {
        params: count_params(&model.store),
        macs: count_macs(model, h, w)?,
        height: h,
        width: w,
        note: MAC_RULES.to_string(),
    })
}
