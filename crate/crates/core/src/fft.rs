//! Real 2D FFT over the last two axes of a tensor, storing only the
//! non-redundant half of the spectrum along the last axis.

use std::cell::RefCell;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_inplace(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let plan = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    });
    plan.process(buf);
}

/// Half-spectrum of a real signal: `real` and `imag` have shape
/// `[..., H, W/2 + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub real: Tensor,
    pub imag: Tensor,
}

impl ComplexSpectrum {
    pub fn new(real: Tensor, imag: Tensor) -> Result<Self> {
        if real.shape() != imag.shape() || real.rank() < 2 {
            return Err(shape_err!("spectrum parts {:?} / {:?}", real.shape(), imag.shape()));
        }
        Ok(Self { real, imag })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            real: Tensor::zeros(shape),
            imag: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }
}

pub(crate) fn half_width(w: usize) -> usize {
    w / 2 + 1
}

/// Forward DFT of one `[h, w]` plane into `re`/`im` of `[h, w/2+1]`.
pub(crate) fn rfft2_plane(x: &[f64], h: usize, w: usize, re: &mut [f64], im: &mut [f64]) {
    let wf = half_width(w);
    let mut grid = vec![Complex64::new(0.0, 0.0); h * wf];
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        for (r, v) in row.iter_mut().zip(&x[y * w..(y + 1) * w]) {
            *r = Complex64::new(*v, 0.0);
        }
        fft_inplace(&mut row, false);
        grid[y * wf..(y + 1) * wf].copy_from_slice(&row[..wf]);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for l in 0..wf {
        for y in 0..h {
            col[y] = grid[y * wf + l];
        }
        fft_inplace(&mut col, false);
        for k in 0..h {
            re[k * wf + l] = col[k].re;
            im[k * wf + l] = col[k].im;
        }
    }
}

/// `x[y, x] = Σ_{k,l} c_l · Re((re + i·im)_{k,l} · e^{2πi(ky/h + lx/w)})`,
/// an unnormalised half-spectrum synthesis with per-column weights `c`.
pub(crate) fn half_synth_plane(re: &[f64], im: &[f64], h: usize, w: usize, c: &[f64], out: &mut [f64]) {
    let wf = half_width(w);
    let mut grid = vec![Complex64::new(0.0, 0.0); h * wf];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for l in 0..wf {
        for k in 0..h {
            col[k] = Complex64::new(re[k * wf + l], im[k * wf + l]) * c[l];
        }
        fft_inplace(&mut col, true);
        for y in 0..h {
            grid[y * wf + l] = col[y];
        }
    }
    let mut row = vec![Complex64::new(0.0, 0.0); w];
    for y in 0..h {
        row.fill(Complex64::new(0.0, 0.0));
        row[..wf].copy_from_slice(&grid[y * wf..(y + 1) * wf]);
        fft_inplace(&mut row, true);
        for (o, v) in out[y * w..(y + 1) * w].iter_mut().zip(&row) {
            *o = v.re;
        }
    }
}

/// Column weights that turn half-spectrum synthesis into the exact inverse:
/// the DC column (and the Nyquist column for even `w`) counts once, every
/// other column stands in for its conjugate twin.
pub(crate) fn hermitian_weights(w: usize) -> Vec<f64> {
    (0..half_width(w))
        .map(|l| if l == 0 || (w % 2 == 0 && l == w / 2) { 1.0 } else { 2.0 })
        .collect()
}

fn split_hw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("FFT needs at least 2 axes, got {:?}", shape));
    }
    let r = shape.len();
    let planes = shape[..r - 2].iter().product();
    Ok((planes, shape[r - 2], shape[r - 1]))
}

/// Real 2D FFT of every trailing `[H, W]` plane.
pub fn rfft2(x: &Tensor) -> Result<ComplexSpectrum> {
    let (planes, h, w) = split_hw(x.shape())?;
    let wf = half_width(w);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = wf;
    let mut s = ComplexSpectrum::zeros(&shape);
    let (re, im) = (s.real.data_mut(), s.imag.data_mut());
    for p in 0..planes {
        rfft2_plane(
            &x.data()[p * h * w..(p + 1) * h * w],
            h,
            w,
            &mut re[p * h * wf..(p + 1) * h * wf],
            &mut im[p * h * wf..(p + 1) * h * wf],
        );
    }
    Ok(s)
}

/// Inverse of [`rfft2`] producing planes of width `w`.
pub fn irfft2(s: &ComplexSpectrum, h: usize, w: usize) -> Result<Tensor> {
    let (planes, sh, sw) = split_hw(s.shape())?;
    if sh != h || sw != half_width(w) {
        return Err(shape_err!("spectrum {:?} does not match {h}x{w}", s.shape()));
    }
    let wf = sw;
    let c = hermitian_weights(w);
    let mut shape = s.shape().to_vec();
    *shape.last_mut().unwrap() = w;
    let mut out = Tensor::zeros(&shape);
    let norm = 1.0 / (h * w) as f64;
    for p in 0..planes {
        let dst = &mut out.data_mut()[p * h * w..(p + 1) * h * w];
        half_synth_plane(
            &s.real.data()[p * h * wf..(p + 1) * h * wf],
            &s.imag.data()[p * h * wf..(p + 1) * h * wf],
            h,
            w,
            &c,
            dst,
        );
        for v in dst.iter_mut() {
            *v *= norm;
        }
    }
    Ok(out)
}
