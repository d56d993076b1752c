use super::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::fft::{half_synth_plane, half_width, hermitian_weights, rfft2_plane};
use crate::tensor::Tensor;

impl Graph {
    /// Real 2D FFT of an NCHW tensor. The result is `[N, 2C, H, W/2+1]`
    /// with real parts in the first `C` channels and imaginary parts after.
    pub fn rfft2(&self, x: &Var) -> Result<Var> {
        let (n, c, h, w) = x.value().dims4()?;
        let wf = half_width(w);
        let sp = h * wf;
        let mut out = Tensor::zeros(&[n, 2 * c, h, wf]);
        {
            let od = out.data_mut();
            for i in 0..n {
                let (re, im) = od[i * 2 * c * sp..(i + 1) * 2 * c * sp].split_at_mut(c * sp);
                for ci in 0..c {
                    let s = (i * c + ci) * h * w;
                    rfft2_plane(
                        &x.value().data()[s..s + h * w],
                        h,
                        w,
                        &mut re[ci * sp..(ci + 1) * sp],
                        &mut im[ci * sp..(ci + 1) * sp],
                    );
                }
            }
        }
        Ok(self.record(out, &[x], move |g, _| {
            let ones = vec![1.0; wf];
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for i in 0..n {
                let gi = &g.data()[i * 2 * c * sp..(i + 1) * 2 * c * sp];
                for ci in 0..c {
                    let s = (i * c + ci) * h * w;
                    half_synth_plane(
                        &gi[ci * sp..(ci + 1) * sp],
                        &gi[(c + ci) * sp..(c + ci + 1) * sp],
                        h,
                        w,
                        &ones,
                        &mut gx.data_mut()[s..s + h * w],
                    );
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Inverse of [`Graph::rfft2`], producing planes of width `w`.
    pub fn irfft2(&self, y: &Var, w: usize) -> Result<Var> {
        let (n, c2, h, wf) = y.value().dims4()?;
        if c2 % 2 != 0 || wf != half_width(w) {
            return Err(shape_err!("spectrum {:?} does not match width {w}", y.shape()));
        }
        let c = c2 / 2;
        let sp = h * wf;
        let norm = 1.0 / (h * w) as f64;
        let cw = hermitian_weights(w);
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for i in 0..n {
            let yi = &y.value().data()[i * c2 * sp..(i + 1) * c2 * sp];
            for ci in 0..c {
                let s = (i * c + ci) * h * w;
                let dst = &mut out.data_mut()[s..s + h * w];
                half_synth_plane(&yi[ci * sp..(ci + 1) * sp], &yi[(c + ci) * sp..(c + ci + 1) * sp], h, w, &cw, dst);
                dst.iter_mut().for_each(|v| *v *= norm);
            }
        }
        Ok(self.record(out, &[y], move |g, _| {
            let mut gy = Tensor::zeros(&[n, c2, h, wf]);
            let mut re = vec![0.0; sp];
            let mut im = vec![0.0; sp];
            for i in 0..n {
                for ci in 0..c {
                    let s = (i * c + ci) * h * w;
                    rfft2_plane(&g.data()[s..s + h * w], h, w, &mut re, &mut im);
                    let base = i * c2 * sp;
                    let gd = gy.data_mut();
                    for k in 0..h {
                        for l in 0..wf {
                            let f = cw[l] * norm;
                            gd[base + ci * sp + k * wf + l] = f * re[k * wf + l];
                            gd[base + (c + ci) * sp + k * wf + l] = f * im[k * wf + l];
                        }
                    }
                }
            }
            vec![Some(gy)]
        }))
    }
}
