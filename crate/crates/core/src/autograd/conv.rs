use super::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Valid output index range `[lo, hi)` along one axis for kernel offset `k`.
#[inline]
fn valid_range(k: usize, stride: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // i = o*stride + k - pad must lie in [0, n_in)
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &Geom, col: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.stride, g.pad, g.h, g.ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.stride, g.pad, g.w, g.wo);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                dst.fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let xr = &xc[iy * g.w..(iy + 1) * g.w];
                    let dr = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let off = xlo + kj - g.pad;
                        dr[xlo..xhi].copy_from_slice(&xr[off..off + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dr[ox] = xr[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geom, x: &mut [f64]) {
    let plane = g.ho * g.wo;
    for ci in 0..g.c {
        let xc = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.stride, g.pad, g.h, g.ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.stride, g.pad, g.w, g.wo);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let xr = &mut xc[iy * g.w..(iy + 1) * g.w];
                    let sr = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        xr[ox * g.stride + kj - g.pad] += sr[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward(x: &[f64], w: &[f64], g: &Geom, out: &mut [f64]) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * plane_in..(c + 1) * plane_in];
        let oc = &mut out[c * plane_out..(c + 1) * plane_out];
        let wc = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.stride, g.pad, g.h, g.ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.stride, g.pad, g.w, g.wo);
                let wv = wc[ki * g.kw + kj];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let xr = &xc[iy * g.w..(iy + 1) * g.w];
                    let or = &mut oc[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let off = kj as isize - g.pad as isize;
                        for ox in xlo..xhi {
                            or[ox] += wv * xr[(ox as isize + off) as usize];
                        }
                    } else {
                        for ox in xlo..xhi {
                            or[ox] += wv * xr[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(x: &[f64], w: &[f64], gout: &[f64], g: &Geom, gx: Option<&mut [f64]>, gw: &mut [f64]) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut gx = gx;
    for c in 0..g.c {
        let xc = &x[c * plane_in..(c + 1) * plane_in];
        let goc = &gout[c * plane_out..(c + 1) * plane_out];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.stride, g.pad, g.h, g.ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.stride, g.pad, g.w, g.wo);
                let widx = c * g.kh * g.kw + ki * g.kw + kj;
                let wv = w[widx];
                let mut acc = 0.0;
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let gr = &goc[oy * g.wo..(oy + 1) * g.wo];
                    let xr = &xc[iy * g.w..(iy + 1) * g.w];
                    for ox in xlo..xhi {
                        acc += gr[ox] * xr[ox * g.stride + kj - g.pad];
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let gxr = &mut gx[c * plane_in + iy * g.w..c * plane_in + (iy + 1) * g.w];
                        for ox in xlo..xhi {
                            gxr[ox * g.stride + kj - g.pad] += wv * gr[ox];
                        }
                    }
                }
                gw[widx] += acc;
            }
        }
    }
}

fn add_bias(out: &mut [f64], b: &[f64], plane: usize) {
    for (c, &bv) in b.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += bv;
        }
    }
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4().expect("rank-4 grad");
    let mut gb = vec![0.0; c];
    for i in 0..n {
        for (ci, slot) in gb.iter_mut().enumerate() {
            let s = (i * c + ci) * h * w;
            *slot += g.data()[s..s + h * w].iter().sum::<f64>();
        }
    }
    Tensor::new(&[c], gb).expect("bias grad")
}

impl Graph {
    /// 2D cross-correlation with zero padding. `w` is `[C_out, C_in/groups, kh, kw]`.
    /// Supports `groups == 1` and depth-wise (`groups == C_in == C_out`).
    pub fn conv2d(
        &self,
        x: &Var,
        w: &Var,
        b: Option<&Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = x.value().dims4()?;
        let (cout, cpg, kh, kw) = w.value().dims4()?;
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let depthwise = groups > 1;
        if depthwise && !(groups == cin && cout == cin && cpg == 1) {
            return Err(shape_err!(
                "only depth-wise grouping is supported (groups={groups}, C_in={cin}, C_out={cout})"
            ));
        }
        if !depthwise && cpg != cin {
            return Err(shape_err!("conv expects {cpg} input channels, got {cin}"));
        }
        if let Some(b) = b {
            if b.shape() != [cout] {
                return Err(shape_err!("bias {:?} for {cout} outputs", b.shape()));
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let geom = Geom {
            c: cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        self.add_conv_macs((n * cout * ho * wo * cpg * kh * kw) as u64);

        let kdim = cpg * kh * kw;
        let plane = ho * wo;
        let in_sz = cin * h * wd;
        let out_sz = cout * plane;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        if !self.is_dry_run() {
            let (xd, wdat) = (x.value().data(), w.value().data());
            let od = out.data_mut();
            let mut col = if depthwise || geom.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0; kdim * plane]
            };
            for i in 0..n {
                let xi = &xd[i * in_sz..(i + 1) * in_sz];
                let oi = &mut od[i * out_sz..(i + 1) * out_sz];
                if depthwise {
                    depthwise_forward(xi, wdat, &geom, oi);
                } else if geom.is_pointwise() {
                    gemm(cout, kdim, plane, wdat, false, xi, false, oi, 0.0);
                } else {
                    im2col(xi, &geom, &mut col);
                    gemm(cout, kdim, plane, wdat, false, &col, false, oi, 0.0);
                }
                if let Some(b) = b {
                    add_bias(oi, b.value().data(), plane);
                }
            }
        }

        let (xv, wv) = (x.rc(), w.rc());
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.record(out, &parents, move |g, needs| {
            let gd = g.data();
            let (xd, wdat) = (xv.data(), wv.data());
            let mut gx = needs[0].then(|| Tensor::zeros(xv.shape()));
            let mut gw = Tensor::zeros(wv.shape());
            let mut col = vec![0.0; if depthwise || geom.is_pointwise() { 0 } else { kdim * plane }];
            let mut gcol = vec![0.0; if depthwise { 0 } else { kdim * plane }];
            for i in 0..n {
                let xi = &xd[i * in_sz..(i + 1) * in_sz];
                let gi = &gd[i * out_sz..(i + 1) * out_sz];
                let gxi = gx.as_mut().map(|t| &mut t.data_mut()[i * in_sz..(i + 1) * in_sz]);
                if depthwise {
                    depthwise_backward(xi, wdat, gi, &geom, gxi, gw.data_mut());
                    continue;
                }
                let colr: &[f64] = if geom.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &geom, &mut col);
                    &col
                };
                if needs[1] {
                    gemm(cout, plane, kdim, gi, false, colr, true, gw.data_mut(), 1.0);
                }
                if let Some(gxi) = gxi {
                    if geom.is_pointwise() {
                        gemm(kdim, cout, plane, wdat, true, gi, false, gxi, 1.0);
                    } else {
                        gemm(kdim, cout, plane, wdat, true, gi, false, &mut gcol, 0.0);
                        col2im(&gcol, &geom, gxi);
                    }
                }
            }
            let mut res = vec![gx, needs[1].then_some(gw)];
            if needs.len() == 3 {
                res.push(needs[2].then(|| bias_grad(g)));
            }
            res
        }))
    }

    /// Transposed convolution without padding. `w` is `[C_in, C_out, k, k]`;
    /// output extent is `(H − 1)·stride + k`.
    pub fn conv_transpose2d(&self, x: &Var, w: &Var, b: Option<&Var>, stride: usize) -> Result<Var> {
        let (n, cin, h, wd) = x.value().dims4()?;
        let (wcin, cout, kh, kw) = w.value().dims4()?;
        if wcin != cin {
            return Err(shape_err!("transposed conv expects {wcin} input channels, got {cin}"));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let ho = (h - 1) * stride + kh;
        let wo = (wd - 1) * stride + kw;
        // geometry of the equivalent forward conv mapping the output back onto the input grid
        let geom = Geom {
            c: cout,
            h: ho,
            w: wo,
            kh,
            kw,
            stride,
            pad: 0,
            ho: h,
            wo: wd,
        };
        self.add_conv_macs((n * cin * cout * kh * kw * h * wd) as u64);
        let kdim = cout * kh * kw;
        let plane = h * wd;
        let in_sz = cin * plane;
        let out_sz = cout * ho * wo;
        let mut out = Tensor::zeros(&[n, cout, ho, wo]);
        if !self.is_dry_run() {
            let mut col = vec![0.0; kdim * plane];
            let (xd, wdat) = (x.value().data(), w.value().data());
            let od = out.data_mut();
            for i in 0..n {
                gemm(kdim, cin, plane, wdat, true, &xd[i * in_sz..(i + 1) * in_sz], false, &mut col, 0.0);
                let oi = &mut od[i * out_sz..(i + 1) * out_sz];
                col2im(&col, &geom, oi);
                if let Some(b) = b {
                    add_bias(oi, b.value().data(), ho * wo);
                }
            }
        }
        let (xv, wv) = (x.rc(), w.rc());
        let mut parents = vec![x, w];
        if let Some(b) = b {
            parents.push(b);
        }
        Ok(self.record(out, &parents, move |g, needs| {
            let gd = g.data();
            let (xd, wdat) = (xv.data(), wv.data());
            let mut gx = needs[0].then(|| Tensor::zeros(xv.shape()));
            let mut gw = Tensor::zeros(wv.shape());
            let mut gcol = vec![0.0; kdim * plane];
            for i in 0..n {
                im2col(&gd[i * out_sz..(i + 1) * out_sz], &geom, &mut gcol);
                if let Some(gx) = gx.as_mut() {
                    gemm(cin, kdim, plane, wdat, false, &gcol, false, &mut gx.data_mut()[i * in_sz..(i + 1) * in_sz], 0.0);
                }
                if needs[1] {
                    gemm(cin, plane, kdim, &xd[i * in_sz..(i + 1) * in_sz], false, &gcol, true, gw.data_mut(), 1.0);
                }
            }
            let mut res = vec![gx, needs[1].then_some(gw)];
            if needs.len() == 3 {
                res.push(needs[2].then(|| bias_grad(g)));
            }
            res
        }))
    }

    /// Max pooling with a square window, no padding, floor output size.
    pub fn max_pool2d(&self, x: &Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        if h < k || w < k {
            return Err(shape_err!("pool window {k} larger than {h}x{w}"));
        }
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = vec![0usize; n * c * ho * wo];
        {
            let (xd, od) = (x.value().data(), out.data_mut());
            for p in 0..n * c {
                let base = p * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = base + oy * stride * w + ox * stride;
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    bi = idx;
                                }
                            }
                        }
                        let o = (p * ho + oy) * wo + ox;
                        od[o] = best;
                        arg[o] = bi;
                    }
                }
            }
        }
        let in_shape = x.shape().to_vec();
        Ok(self.record(out, &[x], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gxd = gx.data_mut();
            for (o, &src) in arg.iter().enumerate() {
                gxd[src] += g.data()[o];
            }
            vec![Some(gx)]
        }))
    }
}
