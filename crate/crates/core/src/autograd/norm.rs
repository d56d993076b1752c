use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Per-channel batch statistics observed during a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (Bessel-corrected) variance, as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

fn check_affine(c: usize, gamma: &Var, beta: &Var) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!(
            "affine params {:?}/{:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(())
}

impl Graph {
    /// Batch normalisation over `(N, H, W)` using the statistics of `x` itself.
    pub fn batch_norm_train(&self, x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = x.value().dims4()?;
        check_affine(c, gamma, beta)?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = x.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for i in 0..n {
                s += xd[(i * c + ci) * hw..(i * c + ci + 1) * hw].iter().sum::<f64>();
            }
            let mu = s / m;
            let mut q = 0.0;
            for i in 0..n {
                q += xd[(i * c + ci) * hw..(i * c + ci + 1) * hw]
                    .iter()
                    .map(|v| (v - mu) * (v - mu))
                    .sum::<f64>();
            }
            mean[ci] = mu;
            var[ci] = q / m;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for ci in 0..c {
                let r = (i * c + ci) * hw..(i * c + ci + 1) * hw;
                for j in r {
                    let xh = (xd[j] - mean[ci]) * inv_std[ci];
                    xhat.data_mut()[j] = xh;
                    out.data_mut()[j] = gd[ci] * xh + bd[ci];
                }
            }
        }
        let corr = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
        let stats = BatchStats {
            mean,
            var_unbiased: var.iter().map(|v| v * corr).collect(),
        };
        let gv = gamma.rc();
        let y = self.record(out, &[x, gamma, beta], move |g, needs| {
            let gdat = g.data();
            let xh = xhat.data();
            let mut sg = vec![0.0; c];
            let mut sgx = vec![0.0; c];
            for i in 0..n {
                for ci in 0..c {
                    for j in (i * c + ci) * hw..(i * c + ci + 1) * hw {
                        sg[ci] += gdat[j];
                        sgx[ci] += gdat[j] * xh[j];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = Tensor::zeros(xhat.shape());
                let gam = gv.data();
                for i in 0..n {
                    for ci in 0..c {
                        let k = gam[ci] * inv_std[ci];
                        let (mg, mgx) = (sg[ci] / m, sgx[ci] / m);
                        for j in (i * c + ci) * hw..(i * c + ci + 1) * hw {
                            gx.data_mut()[j] = k * (gdat[j] - mg - xh[j] * mgx);
                        }
                    }
                }
                gx
            });
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[c], sgx.clone()).expect("gamma grad")),
                needs[2].then(|| Tensor::new(&[c], sg.clone()).expect("beta grad")),
            ]
        });
        Ok((y, stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        check_affine(c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err!("running stats of length {} for {c} channels", mean.len()));
        }
        let hw = h * w;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let xd = x.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        for i in 0..n {
            for ci in 0..c {
                for j in (i * c + ci) * hw..(i * c + ci + 1) * hw {
                    let xh = (xd[j] - mean[ci]) * inv_std[ci];
                    xhat.data_mut()[j] = xh;
                    out.data_mut()[j] = gd[ci] * xh + bd[ci];
                }
            }
        }
        let gv = gamma.rc();
        Ok(self.record(out, &[x, gamma, beta], move |g, needs| {
            let gdat = g.data();
            let mut sg = vec![0.0; c];
            let mut sgx = vec![0.0; c];
            let mut gx = needs[0].then(|| Tensor::zeros(xhat.shape()));
            for i in 0..n {
                for ci in 0..c {
                    let k = gv.data()[ci] * inv_std[ci];
                    for j in (i * c + ci) * hw..(i * c + ci + 1) * hw {
                        sg[ci] += gdat[j];
                        sgx[ci] += gdat[j] * xhat.data()[j];
                        if let Some(gx) = gx.as_mut() {
                            gx.data_mut()[j] = k * gdat[j];
                        }
                    }
                }
            }
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[c], sgx).expect("gamma grad")),
                needs[2].then(|| Tensor::new(&[c], sg).expect("beta grad")),
            ]
        }))
    }

    /// Layer normalisation along `axis` (biased variance), with per-feature
    /// affine parameters of length `shape[axis]`.
    pub fn layer_norm(&self, x: &Var, axis: usize, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("axis {axis} out of range for {:?}", shape));
        }
        let d = shape[axis];
        check_affine(d, gamma, beta)?;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xd = x.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let groups = outer * inner;
        let mut inv_std = vec![0.0; groups];
        let mut xhat = Tensor::zeros(&shape);
        let mut out = Tensor::zeros(&shape);
        let df = d as f64;
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * d + k) * inner + i;
                let mu = (0..d).map(|k| xd[idx(k)]).sum::<f64>() / df;
                let var = (0..d).map(|k| (xd[idx(k)] - mu).powi(2)).sum::<f64>() / df;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for k in 0..d {
                    let xh = (xd[idx(k)] - mu) * is;
                    xhat.data_mut()[idx(k)] = xh;
                    out.data_mut()[idx(k)] = gd[k] * xh + bd[k];
                }
            }
        }
        let gv = gamma.rc();
        Ok(self.record(out, &[x, gamma, beta], move |g, needs| {
            let gdat = g.data();
            let xh = xhat.data();
            let gam = gv.data();
            let mut gx = needs[0].then(|| Tensor::zeros(&shape));
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * d + k) * inner + i;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for k in 0..d {
                        let j = idx(k);
                        let gy = gdat[j] * gam[k];
                        s1 += gy;
                        s2 += gy * xh[j];
                        gg[k] += gdat[j] * xh[j];
                        gb[k] += gdat[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let is = inv_std[o * inner + i];
                        for k in 0..d {
                            let j = idx(k);
                            gx.data_mut()[j] = is * (gdat[j] * gam[k] - s1 / df - xh[j] * s2 / df);
                        }
                    }
                }
            }
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[d], gg).expect("gamma grad")),
                needs[2].then(|| Tensor::new(&[d], gb).expect("beta grad")),
            ]
        }))
    }
}
