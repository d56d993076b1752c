//! Training objective: body/edge BCE, body/edge Dice and a Charbonnier
//! penalty on Scharr gradient magnitudes.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoder::PredictionPair;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before taking logs.
pub const P_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weights of (BCE body, BCE edge, Dice body, Dice edge, gradient).
    pub alpha: [f64; 5],
    pub eps_dice: f64,
    pub eps_char: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: [1.0; 5],
            eps_dice: 1e-6,
            eps_char: 1e-3,
        }
    }
}

/// Scalar value of every loss term; dropped terms are reported as 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub bce_body: f64,
    pub bce_edge: f64,
    pub dice_body: f64,
    pub dice_edge: f64,
    pub grad: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 5] {
        [self.bce_body, self.bce_edge, self.dice_body, self.dice_edge, self.grad]
    }
}

fn check_pair(p: &[usize], g: &[usize]) -> Result<()> {
    if p != g {
        return Err(shape_err!("prediction {:?} vs ground truth {:?}", p, g));
    }
    Ok(())
}

pub fn check_binary(t: &Tensor) -> Result<()> {
    if t.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("ground truth must contain only 0 and 1".into()))
    }
}

/// Leading axis is the batch; everything after it is one image.
fn per_image(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [n, rest @ ..] => (*n, rest.iter().product()),
    }
}

/// Mean binary cross-entropy of probabilities `p` against binary `g`.
pub fn bce_loss(p: &Tensor, g: &Tensor) -> Result<f64> {
    check_pair(p.shape(), g.shape())?;
    check_binary(g)?;
    let s: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &y)| {
            let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(s / p.numel() as f64)
}

/// Batch mean of `1 − (2Σpg + ε)/(Σp + Σg + ε)`.
pub fn dice_loss(p: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    check_pair(p.shape(), g.shape())?;
    let (n, m) = per_image(p.shape());
    let mut acc = 0.0;
    for i in 0..n {
        let pi = &p.data()[i * m..(i + 1) * m];
        let gi = &g.data()[i * m..(i + 1) * m];
        let inter: f64 = pi.iter().zip(gi).map(|(a, b)| a * b).sum();
        let sp: f64 = pi.iter().sum();
        let sg: f64 = gi.iter().sum();
        acc += 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
    }
    Ok(acc / n as f64)
}

pub const SCHARR_X: [f64; 9] = [-3.0, 0.0, 3.0, -10.0, 0.0, 10.0, -3.0, 0.0, 3.0];
pub const SCHARR_Y: [f64; 9] = [-3.0, -10.0, -3.0, 0.0, 0.0, 0.0, 3.0, 10.0, 3.0];

fn scharr_kernels(g: &Graph) -> (Var, Var) {
    let k = |v: [f64; 9]| g.constant(Tensor::new(&[1, 1, 3, 3], v.to_vec()).expect("kernel"));
    (k(SCHARR_X), k(SCHARR_Y))
}

fn as_nchw(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [h, w] => Ok([1, 1, h, w]),
        [c, h, w] if c == 1 => Ok([1, 1, h, w]),
        [n, c, h, w] if c == 1 => Ok([n, 1, h, w]),
        _ => Err(shape_err!("expected a single-channel map, got {:?}", shape)),
    }
}

/// Scharr responses `(g_x, g_y)` of a single-channel map (zero-padded borders).
pub fn scharr_xy(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = Graph::no_grad();
    let xv = g.constant(x.clone().reshape(&as_nchw(x.shape())?)?);
    let (kx, ky) = scharr_kernels(&g);
    let gx = g.conv2d(&xv, &kx, None, 1, 1, 1)?.value().clone().reshape(x.shape())?;
    let gy = g.conv2d(&xv, &ky, None, 1, 1, 1)?.value().clone().reshape(x.shape())?;
    Ok((gx, gy))
}

/// Scharr gradient magnitude `√(g_x² + g_y²)`.
pub fn scharr_gradients(x: &Tensor) -> Result<Tensor> {
    let (gx, gy) = scharr_xy(x)?;
    gx.zip_map(&gy, f64::hypot)
}

/// Mean Charbonnier distance between Scharr magnitudes of `p` and `g`.
pub fn grad_loss(p: &Tensor, g: &Tensor, eps: f64) -> Result<f64> {
    check_pair(p.shape(), g.shape())?;
    let (a, b) = (scharr_gradients(p)?, scharr_gradients(g)?);
    // mean excess over the floor, so identical maps give exactly `eps`
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).hypot(eps) - eps).sum();
    Ok(eps + s / p.numel() as f64)
}

// ---- differentiable forms ---------------------------------------------------

/// Mean BCE of probabilities, clamped like [`bce_loss`].
pub fn bce_prob(g: &Graph, p: &Var, target: &Tensor) -> Result<Var> {
    check_pair(p.shape(), target.shape())?;
    let n = target.numel() as f64;
    let value = bce_loss(p.value(), target)?;
    let (pv, t) = (p.rc(), target.clone());
    Ok(g.record(Tensor::scalar(value), &[p], move |go, _| {
        let go = go.item() / n;
        let gp = pv
            .zip_map(&t, |p, y| {
                if p <= P_CLAMP || p >= 1.0 - P_CLAMP {
                    0.0
                } else {
                    go * (p - y) / (p * (1.0 - p))
                }
            })
            .ok();
        vec![gp]
    }))
}

/// Mean BCE computed from logits (the numerically stable training form).
pub fn bce_logits(g: &Graph, z: &Var, target: &Tensor) -> Result<Var> {
    check_binary(target)?;
    g.bce_with_logits(z, target)
}

pub fn dice(g: &Graph, p: &Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_pair(p.shape(), target.shape())?;
    let (n, m) = per_image(p.shape());
    let pf = g.reshape(p, &[n, m])?;
    let t = g.constant(target.clone().reshape(&[n, m])?);
    let inter = g.sum_axis(&g.mul(&pf, &t)?, 1)?;
    let sp = g.sum_axis(&pf, 1)?;
    let sg = g.sum_axis(&t, 1)?;
    let num = g.add_scalar(&g.scale(&inter, 2.0), eps);
    let den = g.add_scalar(&g.add(&sp, &sg)?, eps);
    let ratio = g.div(&num, &den)?;
    Ok(g.add_scalar(&g.scale(&g.mean_all(&ratio), -1.0), 1.0))
}

/// Differentiable Scharr magnitude of an `[N, 1, H, W]` map.
pub fn scharr_magnitude(g: &Graph, x: &Var) -> Result<Var> {
    let (kx, ky) = scharr_kernels(g);
    let gx = g.conv2d(x, &kx, None, 1, 1, 1)?;
    let gy = g.conv2d(x, &ky, None, 1, 1, 1)?;
    g.hypot(&gx, &gy)
}

pub fn grad_charbonnier(g: &Graph, p: &Var, target: &Tensor, eps: f64) -> Result<Var> {
    check_pair(p.shape(), target.shape())?;
    let shape = as_nchw(p.shape())?;
    let pm = scharr_magnitude(g, &g.reshape(p, &shape)?)?;
    let tm = scharr_gradients(&target.clone().reshape(&shape)?)?;
    let diff = g.sub(&pm, &g.constant(tm))?;
    Ok(g.mean_all(&g.charbonnier(&diff, eps)))
}

/// Weighted objective over a prediction pair. Edge terms are skipped when the
/// model has no edge stream, the gradient term when `use_grad` is false.
pub fn total_loss(
    g: &Graph,
    pred: &PredictionPair,
    g_b: &Tensor,
    g_e: &Tensor,
    cfg: &LossConfig,
    use_grad: bool,
) -> Result<(Var, LossReport)> {
    let a = cfg.alpha;
    let mut terms: Vec<Var> = Vec::new();
    let mut rep = LossReport::default();
    let mut push = |v: Var, w: f64, slot: &mut f64| {
        *slot = v.value().item();
        terms.push(g.scale(&v, w));
    };
    push(bce_logits(g, &pred.z_b, g_b)?, a[0], &mut rep.bce_body);
    if let Some(ze) = &pred.z_e {
        push(bce_logits(g, ze, g_e)?, a[1], &mut rep.bce_edge);
    }
    push(dice(g, &pred.p_b, g_b, cfg.eps_dice)?, a[2], &mut rep.dice_body);
    if let Some(pe) = &pred.p_e {
        push(dice(g, pe, g_e, cfg.eps_dice)?, a[3], &mut rep.dice_edge);
    }
    if use_grad {
        push(grad_charbonnier(g, &pred.p_b, g_b, cfg.eps_char)?, a[4], &mut rep.grad);
    }
    let total = g.add_all(&terms)?;
    rep.total = total.value().item();
    Ok((total, rep))
}
