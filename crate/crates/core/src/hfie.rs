//! High-frequency enhancement: parallel spatial and channel attention gates
//! driven by fixed DCT-II basis projections.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Init, Session};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HfieConfig {
    /// Number of 1D frequencies in the spatial path.
    pub k1: usize,
    /// Number of 2D frequencies (and channel groups) in the channel path.
    pub k2: usize,
    /// MLP reduction ratio.
    pub r: usize,
}

impl Default for HfieConfig {
    fn default() -> Self {
        Self { k1: 8, k2: 8, r: 8 }
    }
}

impl HfieConfig {
    pub fn validate(&self, c: usize) -> Result<()> {
        if self.k1 == 0 || c < self.k1 {
            return Err(Error::Config(format!("spatial path needs C >= k1 (C={c}, k1={})", self.k1)));
        }
        if self.k2 == 0 || c % self.k2 != 0 {
            return Err(Error::Config(format!("k2={} must divide C={c}", self.k2)));
        }
        if self.r == 0 || c / self.r == 0 {
            return Err(Error::Config(format!("reduction r={} too large for C={c}", self.r)));
        }
        Ok(())
    }
}

/// Unnormalised DCT-II basis: `cos(π·f·(2c+1) / 2C)`.
pub fn dct_basis_1d(f: usize, c: usize) -> Result<Vec<f64>> {
    if f >= c {
        return Err(Error::InvalidArgument(format!("frequency {f} out of range for length {c}")));
    }
    Ok((0..c)
        .map(|i| (PI * f as f64 * (2 * i + 1) as f64 / (2 * c) as f64).cos())
        .collect())
}

/// Separable 2D basis plane `[h, w]`.
pub fn dct_basis_2d(fh: usize, fw: usize, h: usize, w: usize) -> Result<Tensor> {
    let bh = dct_basis_1d(fh, h)?;
    let bw = dct_basis_1d(fw, w)?;
    Tensor::new(&[h, w], bh.iter().flat_map(|a| bw.iter().map(move |b| a * b)).collect())
}

pub fn default_freqs_1d(c: usize, k1: usize) -> Vec<usize> {
    let step = c / k1;
    (0..k1).map(|i| (i * step).min(c - 1)).collect()
}

pub fn default_freqs_2d(h: usize, w: usize, k2: usize) -> Vec<(usize, usize)> {
    (0..k2)
        .map(|i| ((i * (h / k2)).min(h - 1), (i * (w / k2)).min(w - 1)))
        .collect()
}

pub fn init_hfie(init: &mut Init, prefix: &str, c: usize, cfg: &HfieConfig) {
    init.scalar(&format!("{prefix}.w1"), 1.0);
    init.scalar(&format!("{prefix}.w2"), 1.0);
    init.conv(&format!("{prefix}.spatial.conv"), 2 * cfg.k1, 1, 3, 1, true);
    for i in 0..cfg.k2 {
        init.conv(&format!("{prefix}.channel.pw{i}"), c, c / cfg.k2, 1, 1, true);
    }
    let hidden = c / cfg.r;
    for m in ["mlp1", "mlp2"] {
        init.linear(&format!("{prefix}.channel.{m}.fc1"), c, hidden);
        init.linear(&format!("{prefix}.channel.{m}.fc2"), hidden, c);
    }
    init.scalar(&format!("{prefix}.channel.w1"), 1.0);
    init.scalar(&format!("{prefix}.channel.w2"), 1.0);
}

/// Spatial gate from channel-max and channel-sum planes of basis-weighted copies.
pub fn spatial_freq_enhance(s: &Session, prefix: &str, x: &Var, cfg: &HfieConfig) -> Result<Var> {
    let g = s.graph();
    let c = x.shape()[1];
    cfg.validate(c)?;
    let mut maxes = Vec::with_capacity(cfg.k1);
    let mut sums = Vec::with_capacity(cfg.k1);
    for f in default_freqs_1d(c, cfg.k1) {
        let a = g.constant(Tensor::new(&[1, c, 1, 1], dct_basis_1d(f, c)?)?);
        let xi = g.mul(x, &a)?;
        maxes.push(g.max_axis(&xi, 1)?);
        sums.push(g.sum_axis(&xi, 1)?);
    }
    maxes.extend(sums);
    let planes = g.concat(&maxes, 1)?;
    let gate = g.sigmoid(&s.conv(&format!("{prefix}.spatial.conv"), &planes, 1, 1, 1)?);
    s.tap(&format!("{prefix}.spatial.gate"), &gate);
    g.mul(x, &gate)
}

fn mlp(s: &Session, prefix: &str, v: &Var) -> Result<Var> {
    let h = s.linear(&format!("{prefix}.fc1"), v)?;
    s.linear(&format!("{prefix}.fc2"), &s.graph().silu(&h))
}

/// Channel gate from global max / sum of basis-weighted, group-compressed copies.
pub fn channel_freq_enhance(s: &Session, prefix: &str, x: &Var, cfg: &HfieConfig) -> Result<Var> {
    let g = s.graph();
    let (n, c, h, w) = x.value().dims4()?;
    cfg.validate(c)?;
    let mut parts = Vec::with_capacity(cfg.k2);
    for (i, (fh, fw)) in default_freqs_2d(h, w, cfg.k2).into_iter().enumerate() {
        let a = g.constant(dct_basis_2d(fh, fw, h, w)?.reshape(&[1, 1, h, w])?);
        let xi = g.mul(x, &a)?;
        parts.push(s.conv(&format!("{prefix}.channel.pw{i}"), &xi, 1, 0, 1)?);
    }
    let z = g.reshape(&g.concat(&parts, 1)?, &[n, c, h * w])?;
    let mx = g.reshape(&g.max_axis(&z, 2)?, &[n, c])?;
    let sm = g.reshape(&g.sum_axis(&z, 2)?, &[n, c])?;
    let m1 = mlp(s, &format!("{prefix}.channel.mlp1"), &mx)?;
    let m2 = mlp(s, &format!("{prefix}.channel.mlp2"), &sm)?;
    let mixed = s.weighted_sum(&[(&format!("{prefix}.channel.w1"), &m1), (&format!("{prefix}.channel.w2"), &m2)])?;
    let gate = g.reshape(&g.sigmoid(&mixed), &[n, c, 1, 1])?;
    s.tap(&format!("{prefix}.channel.gate"), &gate);
    g.mul(x, &gate)
}

/// `w1·spatial(x) + w2·channel(x)`.
pub fn hfie_forward(s: &Session, prefix: &str, x: &Var, cfg: &HfieConfig) -> Result<Var> {
    let f1 = spatial_freq_enhance(s, prefix, x, cfg)?;
    let f2 = channel_freq_enhance(s, prefix, x, cfg)?;
    s.weighted_sum(&[(&format!("{prefix}.w1"), &f1), (&format!("{prefix}.w2"), &f2)])
}
