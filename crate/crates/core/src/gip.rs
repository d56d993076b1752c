//! Global information perception: an FFT-domain branch and a patch-transformer
//! branch fused with the identity path through three learnable scalars.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Init, Session};
use crate::tensor::Tensor;

pub use crate::fft::{irfft2, rfft2, ComplexSpectrum};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GipConfig {
    /// Transformer width as a multiple of the input channels (`d = expand·C`).
    pub expand: usize,
    /// Depth-wise kernel of the local block.
    pub local_kernel: usize,
    /// Depth-wise kernel of the spectral block.
    pub spectral_kernel: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for GipConfig {
    fn default() -> Self {
        Self {
            expand: 2,
            local_kernel: 3,
            spectral_kernel: 7,
            patch_h: 2,
            patch_w: 2,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl GipConfig {
    pub fn validate(&self, c: usize) -> Result<()> {
        let d = self.expand * c;
        if self.expand < 2 {
            return Err(Error::Config(format!("expanded width must exceed C (expand={})", self.expand)));
        }
        if self.patch_h == 0 || self.patch_w == 0 || self.patch_h > self.local_kernel || self.patch_w > self.local_kernel {
            return Err(Error::Config(format!(
                "patch {}x{} must be covered by the {}x{} local kernel",
                self.patch_h, self.patch_w, self.local_kernel, self.local_kernel
            )));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("d={d} not divisible by {} heads", self.heads)));
        }
        if 2 * c / 4 == 0 {
            return Err(Error::Config(format!("C={c} too small for the spectral bottleneck")));
        }
        Ok(())
    }

    /// Patch extent actually used on an `h × w` map: per axis, the largest
    /// size up to the configured one that tiles the map exactly.
    pub fn effective_patch(&self, h: usize, w: usize) -> (usize, usize) {
        let fit = |p: usize, n: usize| (1..=p.min(n).max(1)).rev().find(|q| n % q == 0).unwrap_or(1);
        (fit(self.patch_h, h), fit(self.patch_w, w))
    }
}

/// Non-overlapping patches of one `[d, H, W]` map.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    /// `[N, P, d]`: patch index `a·grid_w + b`, intra-patch position `u·w_p + v`.
    pub patches: Tensor,
    pub h_p: usize,
    pub w_p: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

fn check_patch_geometry(h: usize, w: usize, hp: usize, wp: usize) -> Result<()> {
    if hp == 0 || wp == 0 || h % hp != 0 || w % wp != 0 {
        return Err(Error::Geometry(format!("{h}x{w} map not divisible into {hp}x{wp} patches")));
    }
    Ok(())
}

pub fn unfold_patches(m: &Tensor, hp: usize, wp: usize) -> Result<PatchGrid> {
    if m.rank() != 3 {
        return Err(shape_err!("unfold expects [d,H,W], got {:?}", m.shape()));
    }
    let (d, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    check_patch_geometry(h, w, hp, wp)?;
    let g = Graph::no_grad();
    let x = g.constant(m.clone().reshape(&[1, d, h, w])?);
    let p = unfold(&g, &x, hp, wp)?;
    let (gh, gw) = (h / hp, w / wp);
    // [P, N, d] -> [N, P, d]
    let t = g.permute(&p, &[1, 0, 2])?;
    Ok(PatchGrid {
        patches: t.value().clone(),
        h_p: hp,
        w_p: wp,
        grid_h: gh,
        grid_w: gw,
    })
}

pub fn fold_patches(grid: &PatchGrid, h: usize, w: usize) -> Result<Tensor> {
    let s = grid.patches.shape();
    if s.len() != 3 || grid.grid_h * grid.h_p != h || grid.grid_w * grid.w_p != w || s[0] != grid.grid_h * grid.grid_w || s[1] != grid.h_p * grid.w_p {
        return Err(shape_err!("patch grid {:?} does not tile {h}x{w}", s));
    }
    let d = s[2];
    let g = Graph::no_grad();
    let p = g.permute(&g.constant(grid.patches.clone()), &[1, 0, 2])?;
    let m = fold(&g, &p, 1, h, w, grid.h_p, grid.w_p)?;
    m.value().clone().reshape(&[d, h, w])
}

/// `[B, d, H, W]` → `[B·P, N, d]` so attention runs across patches for each
/// intra-patch position.
pub fn unfold(g: &Graph, x: &Var, hp: usize, wp: usize) -> Result<Var> {
    let (b, d, h, w) = x.value().dims4()?;
    check_patch_geometry(h, w, hp, wp)?;
    let (gh, gw) = (h / hp, w / wp);
    let t = g.reshape(x, &[b, d, gh, hp, gw, wp])?;
    let t = g.permute(&t, &[0, 3, 5, 2, 4, 1])?;
    g.reshape(&t, &[b * hp * wp, gh * gw, d])
}

/// Inverse of [`unfold`].
pub fn fold(g: &Graph, p: &Var, b: usize, h: usize, w: usize, hp: usize, wp: usize) -> Result<Var> {
    check_patch_geometry(h, w, hp, wp)?;
    let (gh, gw) = (h / hp, w / wp);
    let d = *p.shape().last().ok_or_else(|| shape_err!("fold of a scalar"))?;
    if p.value().numel() != b * d * h * w {
        return Err(shape_err!("cannot fold {:?} into [{b},{d},{h},{w}]", p.shape()));
    }
    let t = g.reshape(p, &[b, hp, wp, gh, gw, d])?;
    let t = g.permute(&t, &[0, 5, 3, 1, 4, 2])?;
    g.reshape(&t, &[b, d, h, w])
}

pub fn init_gip(init: &mut Init, prefix: &str, c: usize, cfg: &GipConfig) {
    let c2 = 2 * c;
    let mid = c2 / 4;
    init.batch_norm(&format!("{prefix}.dft.bn1"), c2);
    init.depthwise(&format!("{prefix}.dft.dw"), c2, cfg.spectral_kernel);
    init.batch_norm(&format!("{prefix}.dft.bn2"), c2);
    init.conv(&format!("{prefix}.dft.pw1"), c2, mid, 1, 1, true);
    init.conv(&format!("{prefix}.dft.pw2"), mid, c2, 1, 1, true);
    init.conv(&format!("{prefix}.dft.conv1"), c, c, 3, 1, true);
    init.conv(&format!("{prefix}.dft.conv2"), c, c, 3, 1, true);

    let d = cfg.expand * c;
    init.conv(&format!("{prefix}.tr.expand"), c, d, 1, 1, true);
    init.layer_norm(&format!("{prefix}.tr.ln1"), d);
    init.depthwise(&format!("{prefix}.tr.dw"), d, cfg.local_kernel);
    init.layer_norm(&format!("{prefix}.tr.ln2"), d);
    init.conv(&format!("{prefix}.tr.pw"), d, d, 1, 1, true);
    for l in 0..cfg.depth {
        let p = format!("{prefix}.tr.layer{l}");
        init.layer_norm(&format!("{p}.ln1"), d);
        init.linear(&format!("{p}.qkv"), d, 3 * d);
        init.linear(&format!("{p}.proj"), d, d);
        init.layer_norm(&format!("{p}.ln2"), d);
        init.linear(&format!("{p}.fc1"), d, cfg.mlp_ratio * d);
        init.linear(&format!("{p}.fc2"), cfg.mlp_ratio * d, d);
    }
    init.conv(&format!("{prefix}.tr.project"), d, c, 1, 1, true);

    for w in ["w1", "w2", "w3"] {
        init.scalar(&format!("{prefix}.{w}"), 1.0);
    }
    init.conv(&format!("{prefix}.fuse.conv1"), c, c, 3, 1, true);
    init.batch_norm(&format!("{prefix}.fuse.bn"), c);
    init.conv(&format!("{prefix}.fuse.conv2"), c, c, 3, 1, true);
}

/// rfft2 → spectral block on the stacked real/imag channels → irfft2 → two 3×3 convs.
pub fn dft_branch(s: &Session, prefix: &str, x: &Var) -> Result<Var> {
    let g = s.graph();
    let w = x.shape()[3];
    let p = format!("{prefix}.dft");
    let y = g.rfft2(x)?;
    let y = s.batch_norm(&format!("{p}.bn1"), &y)?;
    let y = s.conv_same(&format!("{p}.dw"), &y)?;
    let y = s.batch_norm(&format!("{p}.bn2"), &y)?;
    let y = g.silu(&s.conv(&format!("{p}.pw1"), &y, 1, 0, 1)?);
    let y = s.conv(&format!("{p}.pw2"), &y, 1, 0, 1)?;
    let m = g.irfft2(&y, w)?;
    let m = g.silu(&s.conv(&format!("{p}.conv1"), &m, 1, 1, 1)?);
    s.conv(&format!("{p}.conv2"), &m, 1, 1, 1)
}

/// Multi-head self-attention over the middle axis of `[T, N, d]`.
fn attention(s: &Session, prefix: &str, x: &Var, heads: usize) -> Result<Var> {
    let g = s.graph();
    let (t, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let qkv = s.linear(&format!("{prefix}.qkv"), x)?;
    let split = |i: usize| -> Result<Var> {
        let v = g.slice_axis(&qkv, 2, i * d, d)?;
        let v = g.reshape(&v, &[t, n, heads, dh])?;
        let v = g.permute(&v, &[0, 2, 1, 3])?;
        g.reshape(&v, &[t * heads, n, dh])
    };
    let (q, k, v) = (split(0)?, split(1)?, split(2)?);
    let scores = g.scale(&g.bmm(&q, &k, true)?, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax_last(&scores)?;
    let o = g.bmm(&attn, &v, false)?;
    let o = g.permute(&g.reshape(&o, &[t, heads, n, dh])?, &[0, 2, 1, 3])?;
    let o = g.reshape(&o, &[t, n, d])?;
    s.linear(&format!("{prefix}.proj"), &o)
}

/// Pre-norm transformer layers over `[T, N, d]` token sets.
pub fn transformer_forward(s: &Session, prefix: &str, tokens: &Var, cfg: &GipConfig) -> Result<Var> {
    let g = s.graph();
    if tokens.shape().len() != 3 {
        return Err(shape_err!("transformer expects [T,N,d], got {:?}", tokens.shape()));
    }
    let d = tokens.shape()[2];
    if cfg.heads == 0 || d % cfg.heads != 0 {
        return Err(Error::Config(format!("d={d} not divisible by {} heads", cfg.heads)));
    }
    let mut x = tokens.clone();
    for l in 0..cfg.depth {
        let p = format!("{prefix}.layer{l}");
        let a = attention(s, &p, &s.layer_norm(&format!("{p}.ln1"), &x, 2)?, cfg.heads)?;
        x = g.add(&x, &a)?;
        let h = s.linear(&format!("{p}.fc1"), &s.layer_norm(&format!("{p}.ln2"), &x, 2)?)?;
        let h = s.linear(&format!("{p}.fc2"), &g.silu(&h))?;
        x = g.add(&x, &h)?;
    }
    Ok(x)
}

/// Expand → local block → unfold → transformer → fold → project.
pub fn transformer_branch(s: &Session, prefix: &str, x: &Var, cfg: &GipConfig) -> Result<Var> {
    let (b, c, h, w) = x.value().dims4()?;
    cfg.validate(c)?;
    let (hp, wp) = cfg.effective_patch(h, w);
    let p = format!("{prefix}.tr");
    let y = s.conv(&format!("{p}.expand"), x, 1, 0, 1)?;
    let y = s.layer_norm(&format!("{p}.ln1"), &y, 1)?;
    let y = s.conv_same(&format!("{p}.dw"), &y)?;
    let y = s.layer_norm(&format!("{p}.ln2"), &y, 1)?;
    let y = s.conv(&format!("{p}.pw"), &y, 1, 0, 1)?;
    let tokens = unfold(s.graph(), &y, hp, wp)?;
    let tokens = transformer_forward(s, &p, &tokens, cfg)?;
    let y = fold(s.graph(), &tokens, b, h, w, hp, wp)?;
    s.conv(&format!("{p}.project"), &y, 1, 0, 1)
}

/// `FuseBlock(w1·O_d + w2·M + w3·O_t)` with FuseBlock = conv → BN → conv → SiLU.
pub fn gip_forward(s: &Session, prefix: &str, x: &Var, cfg: &GipConfig) -> Result<Var> {
    let od = dft_branch(s, prefix, x)?;
    let ot = transformer_branch(s, prefix, x, cfg)?;
    let mixed = s.weighted_sum(&[
        (&format!("{prefix}.w1"), &od),
        (&format!("{prefix}.w2"), x),
        (&format!("{prefix}.w3"), &ot),
    ])?;
    fuse_block(s, prefix, &mixed)
}

pub fn fuse_block(s: &Session, prefix: &str, x: &Var) -> Result<Var> {
    let y = s.conv(&format!("{prefix}.fuse.conv1"), x, 1, 1, 1)?;
    let y = s.batch_norm(&format!("{prefix}.fuse.bn"), &y)?;
    let y = s.conv(&format!("{prefix}.fuse.conv2"), &y, 1, 1, 1)?;
    Ok(s.graph().silu(&y))
}
