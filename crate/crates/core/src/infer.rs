//! Single-image inference, PNG export and Grad-CAM heatmaps.

use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::autograd::resize_planes;
use crate::data::{image_to_rgb, to_u8};
use crate::error::{shape_err, Error, Result};
use crate::model::BgCrack;
use crate::nn::Session;
use crate::tensor::Tensor;

pub const OVERLAY_ALPHA: f64 = 0.5;
pub const BODY_COLOR: [f64; 3] = [1.0, 0.0, 0.0];
pub const EDGE_COLOR: [f64; 3] = [0.0, 1.0, 0.0];

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pad a `[C, H, W]` image at the bottom/right up to multiples of 32.
pub fn pad_to_multiple(img: &Tensor, m: usize) -> Result<Tensor> {
    let (c, h, w) = match img.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(shape_err!("expected [C,H,W], got {:?}", s)),
    };
    if h == 0 || w == 0 {
        return Err(Error::Geometry("empty image".into()));
    }
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ci in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                out.data_mut()[(ci * ph + y) * pw + x] = img.data()[(ci * h + reflect(y, h)) * w + reflect(x, w)];
            }
        }
    }
    Ok(out)
}

/// Top-left `h × w` window of every plane.
pub fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = match t.shape() {
        [c, th, tw] => (*c, *th, *tw),
        s => return Err(shape_err!("expected [C,H,W], got {:?}", s)),
    };
    if h > th || w > tw {
        return Err(shape_err!("cannot crop {th}x{tw} to {h}x{w}"));
    }
    let mut out = Tensor::zeros(&[c, h, w]);
    for ci in 0..c {
        for y in 0..h {
            let src = (ci * th + y) * tw;
            out.data_mut()[(ci * h + y) * w..(ci * h + y + 1) * w].copy_from_slice(&t.data()[src..src + w]);
        }
    }
    Ok(out)
}

/// Body and edge probability maps `[1, H, W]` at the input's own size.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub p_b: Tensor,
    pub p_e: Option<Tensor>,
}

pub fn predict_image(model: &BgCrack, img: &Tensor) -> Result<Prediction> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let padded = pad_to_multiple(img, 32)?;
    let (c, ph, pw) = (padded.shape()[0], padded.shape()[1], padded.shape()[2]);
    let s = Session::new(&model.store, Graph::no_grad(), false);
    let x = s.graph().constant(padded.reshape(&[1, c, ph, pw])?);
    let pred = model.forward(&s, &x)?;
    let back = |t: &Tensor| crop(&t.clone().reshape(&[1, ph, pw])?, h, w);
    Ok(Prediction {
        p_b: back(pred.p_b.value())?,
        p_e: pred.p_e.as_ref().map(|p| back(p.value())).transpose()?,
    })
}

fn blend(base: [f64; 3], color: [f64; 3], alpha: f64) -> [f64; 3] {
    [0, 1, 2].map(|c| (1.0 - alpha) * base[c] + alpha * color[c])
}

/// Body pixels tinted red, then edge pixels tinted green, both at 50% alpha.
pub fn overlay(img: &Tensor, body: &Tensor, edge: &Tensor) -> Result<RgbImage> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if body.numel() != h * w || edge.numel() != h * w {
        return Err(shape_err!("masks do not match the {h}x{w} image"));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let mut px = [0, 1, 2].map(|c| img.data()[c * h * w + i]);
        if body.data()[i] > 0.5 {
            px = blend(px, BODY_COLOR, OVERLAY_ALPHA);
        }
        if edge.data()[i] > 0.5 {
            px = blend(px, EDGE_COLOR, OVERLAY_ALPHA);
        }
        Rgb(px.map(to_u8))
    }))
}

fn binary_png(p: &Tensor, h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if p.data()[y as usize * w + x as usize] >= 0.5 { 255 } else { 0 }])
    })
}

/// Paths written by [`write_prediction`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictionFiles {
    pub mask: PathBuf,
    pub edge: PathBuf,
    pub overlay: PathBuf,
}

/// Write `<stem>_mask.png`, `<stem>_edge.png` and `<stem>_overlay.png`.
/// Without an edge stream the edge mask is all zero.
pub fn write_prediction(out_dir: &Path, stem: &str, img: &Tensor, pred: &Prediction) -> Result<PredictionFiles> {
    std::fs::create_dir_all(out_dir)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let body = pred.p_b.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let edge = match &pred.p_e {
        Some(p) => p.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }),
        None => Tensor::zeros(&[1, h, w]),
    };
    let files = PredictionFiles {
        mask: out_dir.join(format!("{stem}_mask.png")),
        edge: out_dir.join(format!("{stem}_edge.png")),
        overlay: out_dir.join(format!("{stem}_overlay.png")),
    };
    binary_png(&body, h, w).save(&files.mask)?;
    binary_png(&edge, h, w).save(&files.edge)?;
    overlay(img, &body, &edge)?.save(&files.overlay)?;
    Ok(files)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamTarget {
    Body,
    Edge,
}

impl std::str::FromStr for CamTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(Self::Body),
            "edge" => Ok(Self::Edge),
            _ => Err(Error::InvalidArgument(format!("unknown Grad-CAM target {s:?} (body|edge)"))),
        }
    }
}

/// Grad-CAM from activations `[1, C, h, w]` and their gradients: channel
/// weights are spatial gradient means; the rectified weighted sum is min-max
/// normalised (all-zero when constant).
pub fn cam_from(act: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = act.dims4()?;
    if grad.shape() != act.shape() {
        return Err(shape_err!("gradient {:?} vs activation {:?}", grad.shape(), act.shape()));
    }
    let hw = h * w;
    let mut cam = vec![0.0; hw];
    for ci in 0..c {
        let g = &grad.data()[ci * hw..(ci + 1) * hw];
        let alpha = g.iter().sum::<f64>() / hw as f64;
        for (o, a) in cam.iter_mut().zip(&act.data()[ci * hw..(ci + 1) * hw]) {
            *o += alpha * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let (lo, hi) = cam.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &v| (l.min(v), u.max(v)));
    if hi > lo {
        cam.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
    } else {
        cam.fill(0.0);
    }
    Tensor::new(&[h, w], cam)
}

/// Heatmap `[H, W]` in `[0, 1]` for the activation tapped as `layer`.
pub fn gradcam(model: &BgCrack, img: &Tensor, target: CamTarget, layer: &str) -> Result<Tensor> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let padded = pad_to_multiple(img, 32)?;
    let (c, ph, pw) = (padded.shape()[0], padded.shape()[1], padded.shape()[2]);
    let s = Session::new(&model.store, Graph::new(), false);
    let g = s.graph();
    let pred = model.forward(&s, &g.constant(padded.reshape(&[1, c, ph, pw])?))?;
    let act = s.tapped(layer).ok_or_else(|| {
        Error::InvalidArgument(format!("unknown layer {layer:?}; available: {}", s.tap_names().join(", ")))
    })?;
    let logits = match target {
        CamTarget::Body => pred.z_b.clone(),
        CamTarget::Edge => pred
            .z_e
            .clone()
            .ok_or_else(|| Error::InvalidArgument("model has no edge stream".into()))?,
    };
    let root = g.sum_all(&logits);
    let grads = g.backward_with(&root, Tensor::ones(&[1]), &[&act])?;
    let grad = grads.get_or_zeros(&act);
    let cam = cam_from(act.value(), &grad)?;
    let (ch, cw) = (cam.shape()[0], cam.shape()[1]);
    let up = Tensor::new(&[1, ph, pw], resize_planes(cam.data(), 1, ch, cw, ph, pw))?;
    crop(&up, h, w)?.reshape(&[h, w])
}

/// Piecewise-linear jet colormap.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Heatmap blended 50/50 over the input image.
pub fn render_heatmap(img: &Tensor, heat: &Tensor) -> Result<RgbImage> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if heat.numel() != h * w {
        return Err(shape_err!("heatmap {:?} vs image {h}x{w}", heat.shape()));
    }
    let base = image_to_rgb(img)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let j = jet(heat.data()[y as usize * w + x as usize]);
        let b = base.get_pixel(x, y);
        Rgb([0, 1, 2].map(|c| to_u8(0.5 * b[c] as f64 / 255.0 + 0.5 * j[c])))
    }))
}
