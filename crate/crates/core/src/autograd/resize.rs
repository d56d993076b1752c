use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Source taps `(i0, i1, λ)` for half-pixel-centre bilinear sampling.
pub(crate) fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every `[H, W]` plane of an NCHW slice.
pub(crate) fn resize_planes(x: &[f64], planes: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, ho);
    let tx = bilinear_taps(w, wo);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

impl Graph {
    /// Bilinear resize of an NCHW tensor to `(ho, wo)` without corner alignment.
    pub fn resize_bilinear(&self, x: &Var, ho: usize, wo: usize) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        if ho == 0 || wo == 0 || h == 0 || w == 0 {
            return Err(shape_err!("empty resize {h}x{w} -> {ho}x{wo}"));
        }
        if (h, w) == (ho, wo) {
            return Ok(x.clone());
        }
        let out = Tensor::new(&[n, c, ho, wo], resize_planes(x.value().data(), n * c, h, w, ho, wo))?;
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let ty = bilinear_taps(h, ho);
            let tx = bilinear_taps(w, wo);
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for p in 0..n * c {
                let gs = &g.data()[p * ho * wo..(p + 1) * ho * wo];
                let dst = &mut gxd[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let v = gs[oy * wo + ox];
                        dst[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                        dst[y0 * w + x1] += v * (1.0 - ly) * lx;
                        dst[y1 * w + x0] += v * ly * (1.0 - lx);
                        dst[y1 * w + x1] += v * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `resize_bilinear` to twice the spatial extent.
    pub fn upsample2(&self, x: &Var) -> Result<Var> {
        let (_, _, h, w) = x.value().dims4()?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }
}
