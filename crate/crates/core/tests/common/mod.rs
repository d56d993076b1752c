//! Scalar-loop reference implementations. Nothing here calls into the
//! library's numeric code; parameters are read straight from the store.
#![allow(dead_code)]

use std::f64::consts::PI;

use bgcrack::nn::ParamStore;
use bgcrack::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// One `[C, H, W]` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, d: vec![0.0; c * h * w] }
    }

    pub fn from_fn(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(c, h, w);
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *m.at_mut(ci, y, x) = f(ci, y, x);
                }
            }
        }
        m
    }

    /// Accepts `[C,H,W]` or `[1,C,H,W]`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let (c, h, w) = match t.shape() {
            [1, c, h, w] | [c, h, w] => (*c, *h, *w),
            s => panic!("not a single map: {s:?}"),
        };
        Self { c, h, w, d: t.data().to_vec() }
    }

    pub fn tensor4(&self) -> Tensor {
        Tensor::new(&[1, self.c, self.h, self.w], self.d.clone()).unwrap()
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.d[(c * self.h + y) * self.w + x]
    }

    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.d[(c * self.h + y) * self.w + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { d: self.d.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn add(&self, o: &Map) -> Self {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Self { d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect(), ..self.clone() }
    }

    pub fn mul(&self, o: &Map) -> Self {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Self { d: self.d.iter().zip(&o.d).map(|(a, b)| a * b).collect(), ..self.clone() }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn concat(parts: &[&Map]) -> Self {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut d = Vec::new();
        for p in parts {
            assert_eq!((p.h, p.w), (h, w));
            d.extend_from_slice(&p.d);
        }
        Self { c: d.len() / (h * w), h, w, d }
    }

    pub fn max_abs_diff(&self, t: &Tensor) -> f64 {
        assert_eq!(self.d.len(), t.numel(), "size mismatch");
        self.d.iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.param(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

pub fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> Map {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Map::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Give every batch-norm running statistic a non-trivial value.
pub fn perturb_buffers(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.buffers().map(|(k, _)| k.clone()).collect();
    for n in names {
        let b = store.buffer_mut(&n).unwrap();
        let var = n.ends_with("running_var");
        for v in b.data_mut() {
            *v = if var { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.3..0.3) };
        }
    }
}

/// Move every parameter away from its initial value (norm affines, zero
/// biases, unit mixing scalars) so no term is accidentally an identity.
pub fn perturb_params(store: &mut ParamStore, seed: u64, amount: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-amount..amount);
        }
    }
}

// ---- layers -----------------------------------------------------------------

/// Zero-padded cross-correlation; weight `[Co, Ci/groups, k, k]`.
pub fn conv(x: &Map, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize, groups: usize) -> Map {
    let (co, cig, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(cig * groups, x.c);
    let ho = (x.h + 2 * pad - k) / stride + 1;
    let wo = (x.w + 2 * pad - k) / stride + 1;
    let cog = co / groups;
    Map::from_fn(co, ho, wo, |o, y, xx| {
        let grp = o / cog;
        let mut s = b.map_or(0.0, |b| b.data()[o]);
        for ci in 0..cig {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                        continue;
                    }
                    s += x.at(grp * cig + ci, iy as usize, ix as usize)
                        * w.data()[((o * cig + ci) * k + ky) * k + kx];
                }
            }
        }
        s
    })
}

/// Convolution `name` from the store, same-padded at stride 1; depth-wise when
/// the kernel has a single input channel.
pub fn conv_named(store: &ParamStore, name: &str, x: &Map, stride: usize, pad: usize) -> Map {
    let w = p(store, &format!("{name}.weight"));
    let groups = if w.shape()[1] == 1 && x.c > 1 { x.c } else { 1 };
    conv(x, w, store.param(&format!("{name}.bias")), stride, pad, groups)
}

pub fn conv_same(store: &ParamStore, name: &str, x: &Map) -> Map {
    let k = p(store, &format!("{name}.weight")).shape()[2];
    conv_named(store, name, x, 1, k / 2)
}

/// Transposed convolution by scattering; weight `[Ci, Co, k, k]`, no padding.
pub fn conv_t(x: &Map, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Map {
    let (ci, co, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    assert_eq!(ci, x.c);
    let (ho, wo) = ((x.h - 1) * stride + k, (x.w - 1) * stride + k);
    let mut out = Map::from_fn(co, ho, wo, |o, _, _| b.map_or(0.0, |b| b.data()[o]));
    for i in 0..ci {
        for y in 0..x.h {
            for xx in 0..x.w {
                let v = x.at(i, y, xx);
                for o in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            *out.at_mut(o, y * stride + ky, xx * stride + kx) +=
                                v * w.data()[((i * co + o) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_t_named(store: &ParamStore, name: &str, x: &Map) -> Map {
    conv_t(x, p(store, &format!("{name}.weight")), store.param(&format!("{name}.bias")), 2)
}

pub fn maxpool2(x: &Map) -> Map {
    Map::from_fn(x.c, x.h / 2, x.w / 2, |c, y, xx| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                m = m.max(x.at(c, 2 * y + dy, 2 * xx + dx));
            }
        }
        m
    })
}

/// Inference-mode batch norm with the stored running statistics.
pub fn bn_eval(store: &ParamStore, name: &str, x: &Map) -> Map {
    let g = p(store, &format!("{name}.weight"));
    let b = p(store, &format!("{name}.bias"));
    let m = store.buffer(&format!("{name}.running_mean")).unwrap();
    let v = store.buffer(&format!("{name}.running_var")).unwrap();
    Map::from_fn(x.c, x.h, x.w, |c, y, xx| {
        (x.at(c, y, xx) - m.data()[c]) / (v.data()[c] + BN_EPS).sqrt() * g.data()[c] + b.data()[c]
    })
}

/// Layer norm across channels at every pixel.
pub fn ln_channels(store: &ParamStore, name: &str, x: &Map) -> Map {
    let g = p(store, &format!("{name}.weight"));
    let b = p(store, &format!("{name}.bias"));
    let mut out = x.clone();
    for y in 0..x.h {
        for xx in 0..x.w {
            let v: Vec<f64> = (0..x.c).map(|c| x.at(c, y, xx)).collect();
            let n = ln_vec(&v, g.data(), b.data());
            for c in 0..x.c {
                *out.at_mut(c, y, xx) = n[c];
            }
        }
    }
    out
}

pub fn ln_vec(v: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / n;
    v.iter().enumerate().map(|(i, a)| (a - mu) / (var + LN_EPS).sqrt() * g[i] + b[i]).collect()
}

/// `y = W x + b` with `W: [out, in]`.
pub fn linear(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = p(store, &format!("{name}.weight"));
    let b = store.param(&format!("{name}.bias"));
    let (o, i) = (w.shape()[0], w.shape()[1]);
    assert_eq!(i, x.len());
    (0..o)
        .map(|r| b.map_or(0.0, |b| b.data()[r]) + (0..i).map(|c| w.data()[r * i + c] * x[c]).sum::<f64>())
        .collect()
}

fn taps(n_in: usize, n_out: usize, o: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    (i0, (i0 + 1).min(n_in - 1), src - i0 as f64)
}

/// Half-pixel-centred bilinear resize.
pub fn bilinear(x: &Map, ho: usize, wo: usize) -> Map {
    if (x.h, x.w) == (ho, wo) {
        return x.clone();
    }
    Map::from_fn(x.c, ho, wo, |c, y, xx| {
        let (y0, y1, ly) = taps(x.h, ho, y);
        let (x0, x1, lx) = taps(x.w, wo, xx);
        (1.0 - ly) * ((1.0 - lx) * x.at(c, y0, x0) + lx * x.at(c, y0, x1))
            + ly * ((1.0 - lx) * x.at(c, y1, x0) + lx * x.at(c, y1, x1))
    })
}

// ---- spectral ---------------------------------------------------------------

pub fn dct1(f: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| (PI * f as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()).collect()
}

/// Brute-force half spectrum of one plane: `(re, im)` of shape `[H, W/2+1]`.
pub fn dft2_half(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let wf = w / 2 + 1;
    let (mut re, mut im) = (vec![0.0; h * wf], vec![0.0; h * wf]);
    for k in 0..h {
        for l in 0..wf {
            for m in 0..h {
                for n in 0..w {
                    let a = -2.0 * PI * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                    re[k * wf + l] += x[m * w + n] * a.cos();
                    im[k * wf + l] += x[m * w + n] * a.sin();
                }
            }
        }
    }
    (re, im)
}

/// Real part of the full inverse DFT after completing the half spectrum by
/// conjugate symmetry.
pub fn idft2_half(re: &[f64], im: &[f64], h: usize, w: usize) -> Vec<f64> {
    let wf = w / 2 + 1;
    let full = |k: usize, l: usize| -> (f64, f64) {
        if l < wf {
            (re[k * wf + l], im[k * wf + l])
        } else {
            let (kk, ll) = ((h - k) % h, w - l);
            (re[kk * wf + ll], -im[kk * wf + ll])
        }
    };
    let mut out = vec![0.0; h * w];
    for m in 0..h {
        for n in 0..w {
            let mut s = 0.0;
            for k in 0..h {
                for l in 0..w {
                    let (a, b) = full(k, l);
                    let t = 2.0 * PI * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                    s += a * t.cos() - b * t.sin();
                }
            }
            out[m * w + n] = s / (h * w) as f64;
        }
    }
    out
}

/// `[2C, H, W/2+1]`: real parts of all channels, then imaginary parts.
pub fn rfft_map(x: &Map) -> Map {
    let wf = x.w / 2 + 1;
    let mut out = Map::zeros(2 * x.c, x.h, wf);
    for c in 0..x.c {
        let (re, im) = dft2_half(&x.d[c * x.h * x.w..(c + 1) * x.h * x.w], x.h, x.w);
        out.d[c * x.h * wf..(c + 1) * x.h * wf].copy_from_slice(&re);
        out.d[(x.c + c) * x.h * wf..(x.c + c + 1) * x.h * wf].copy_from_slice(&im);
    }
    out
}

pub fn irfft_map(y: &Map, w: usize) -> Map {
    let c = y.c / 2;
    let n = y.h * y.w;
    let mut out = Map::zeros(c, y.h, w);
    for ci in 0..c {
        let plane = idft2_half(&y.d[ci * n..(ci + 1) * n], &y.d[(c + ci) * n..(c + ci + 1) * n], y.h, w);
        out.d[ci * y.h * w..(ci + 1) * y.h * w].copy_from_slice(&plane);
    }
    out
}

// ---- modules ------------------------------------------------------------------

pub fn stem(store: &ParamStore, img: &Map) -> Map {
    let x = conv_named(store, "backbone.stem.conv", img, 2, 1);
    let x = conv_same(store, "backbone.stem.dw", &x);
    maxpool2(&x)
}

pub fn conv_block(store: &ParamStore, prefix: &str, x: &Map) -> Map {
    let y = conv_named(store, &format!("{prefix}.conv"), x, 1, 1);
    let y = bn_eval(store, &format!("{prefix}.bn"), &y);
    conv_same(store, &format!("{prefix}.dw"), &y).map(silu)
}

/// `(x_s, [level1..level4])`.
pub fn backbone(store: &ParamStore, img: &Map) -> (Map, Vec<Map>) {
    let xs = stem(store, img);
    let mut cur = xs.clone();
    let mut levels = Vec::new();
    for k in 1..=4 {
        if k > 1 {
            cur = maxpool2(&cur);
        }
        cur = conv_block(store, &format!("backbone.block{k}"), &cur);
        levels.push(cur.clone());
    }
    (xs, levels)
}

pub fn freqs_1d(c: usize, k1: usize) -> Vec<usize> {
    (0..k1).map(|i| (i * (c / k1)).min(c - 1)).collect()
}

pub fn freqs_2d(h: usize, w: usize, k2: usize) -> Vec<(usize, usize)> {
    (0..k2).map(|i| ((i * (h / k2)).min(h - 1), (i * (w / k2)).min(w - 1))).collect()
}

pub fn spatial_freq(store: &ParamStore, prefix: &str, x: &Map, k1: usize) -> Map {
    let fr = freqs_1d(x.c, k1);
    let mut planes = Map::zeros(2 * k1, x.h, x.w);
    for (i, &f) in fr.iter().enumerate() {
        let a = dct1(f, x.c);
        for y in 0..x.h {
            for xx in 0..x.w {
                let vals: Vec<f64> = (0..x.c).map(|c| x.at(c, y, xx) * a[c]).collect();
                *planes.at_mut(i, y, xx) = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                *planes.at_mut(k1 + i, y, xx) = vals.iter().sum();
            }
        }
    }
    let gate = conv_named(store, &format!("{prefix}.spatial.conv"), &planes, 1, 1).map(sigmoid);
    Map::from_fn(x.c, x.h, x.w, |c, y, xx| x.at(c, y, xx) * gate.at(0, y, xx))
}

fn mlp(store: &ParamStore, prefix: &str, v: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = linear(store, &format!("{prefix}.fc1"), v).into_iter().map(silu).collect();
    linear(store, &format!("{prefix}.fc2"), &h)
}

pub fn channel_freq(store: &ParamStore, prefix: &str, x: &Map, k2: usize) -> Map {
    let mut z = Vec::new();
    for (i, (fh, fw)) in freqs_2d(x.h, x.w, k2).into_iter().enumerate() {
        let (bh, bw) = (dct1(fh, x.h), dct1(fw, x.w));
        let xi = Map::from_fn(x.c, x.h, x.w, |c, y, xx| x.at(c, y, xx) * bh[y] * bw[xx]);
        z.push(conv_named(store, &format!("{prefix}.channel.pw{i}"), &xi, 1, 0));
    }
    let z = Map::concat(&z.iter().collect::<Vec<_>>());
    let hw = x.h * x.w;
    let mx: Vec<f64> = (0..x.c).map(|c| z.d[c * hw..(c + 1) * hw].iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let sm: Vec<f64> = (0..x.c).map(|c| z.d[c * hw..(c + 1) * hw].iter().sum()).collect();
    let m1 = mlp(store, &format!("{prefix}.channel.mlp1"), &mx);
    let m2 = mlp(store, &format!("{prefix}.channel.mlp2"), &sm);
    let w1 = p(store, &format!("{prefix}.channel.w1")).item();
    let w2 = p(store, &format!("{prefix}.channel.w2")).item();
    let gate: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| sigmoid(w1 * a + w2 * b)).collect();
    Map::from_fn(x.c, x.h, x.w, |c, y, xx| x.at(c, y, xx) * gate[c])
}

pub fn hfie(store: &ParamStore, prefix: &str, x: &Map, k1: usize, k2: usize) -> Map {
    let w1 = p(store, &format!("{prefix}.w1")).item();
    let w2 = p(store, &format!("{prefix}.w2")).item();
    spatial_freq(store, prefix, x, k1).scale(w1).add(&channel_freq(store, prefix, x, k2).scale(w2))
}

pub fn dft_branch(store: &ParamStore, prefix: &str, x: &Map) -> Map {
    let q = format!("{prefix}.dft");
    let y = rfft_map(x);
    let y = bn_eval(store, &format!("{q}.bn1"), &y);
    let y = conv_same(store, &format!("{q}.dw"), &y);
    let y = bn_eval(store, &format!("{q}.bn2"), &y);
    let y = conv_named(store, &format!("{q}.pw1"), &y, 1, 0).map(silu);
    let y = conv_named(store, &format!("{q}.pw2"), &y, 1, 0);
    let m = irfft_map(&y, x.w);
    let m = conv_named(store, &format!("{q}.conv1"), &m, 1, 1).map(silu);
    conv_named(store, &format!("{q}.conv2"), &m, 1, 1)
}

/// Pre-norm transformer over one token set `[N][d]`.
pub fn transformer_tokens(store: &ParamStore, prefix: &str, tokens: &[Vec<f64>], depth: usize, heads: usize) -> Vec<Vec<f64>> {
    let mut x = tokens.to_vec();
    let d = x[0].len();
    let dh = d / heads;
    for l in 0..depth {
        let q = format!("{prefix}.layer{l}");
        let g1 = p(store, &format!("{q}.ln1.weight")).data().to_vec();
        let b1 = p(store, &format!("{q}.ln1.bias")).data().to_vec();
        let qkv: Vec<Vec<f64>> = x.iter().map(|t| linear(store, &format!("{q}.qkv"), &ln_vec(t, &g1, &b1))).collect();
        let mut att = vec![vec![0.0; d]; x.len()];
        for hd in 0..heads {
            for i in 0..x.len() {
                let scores: Vec<f64> = (0..x.len())
                    .map(|j| (0..dh).map(|e| qkv[i][hd * dh + e] * qkv[j][d + hd * dh + e]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = ex.iter().sum();
                for e in 0..dh {
                    att[i][hd * dh + e] = (0..x.len()).map(|j| ex[j] / z * qkv[j][2 * d + hd * dh + e]).sum();
                }
            }
        }
        for i in 0..x.len() {
            let a = linear(store, &format!("{q}.proj"), &att[i]);
            for e in 0..d {
                x[i][e] += a[e];
            }
        }
        let g2 = p(store, &format!("{q}.ln2.weight")).data().to_vec();
        let b2 = p(store, &format!("{q}.ln2.bias")).data().to_vec();
        for t in x.iter_mut() {
            let hdn: Vec<f64> = linear(store, &format!("{q}.fc1"), &ln_vec(t, &g2, &b2)).into_iter().map(silu).collect();
            let o = linear(store, &format!("{q}.fc2"), &hdn);
            for e in 0..d {
                t[e] += o[e];
            }
        }
    }
    x
}

pub fn transformer_branch(store: &ParamStore, prefix: &str, x: &Map, patch: (usize, usize), depth: usize, heads: usize) -> Map {
    let q = format!("{prefix}.tr");
    let y = conv_named(store, &format!("{q}.expand"), x, 1, 0);
    let y = ln_channels(store, &format!("{q}.ln1"), &y);
    let y = conv_same(store, &format!("{q}.dw"), &y);
    let y = ln_channels(store, &format!("{q}.ln2"), &y);
    let y = conv_named(store, &format!("{q}.pw"), &y, 1, 0);
    let (hp, wp) = (patch.0.min(x.h), patch.1.min(x.w));
    let (gh, gw) = (y.h / hp, y.w / wp);
    let mut out = y.clone();
    for u in 0..hp {
        for v in 0..wp {
            let tokens: Vec<Vec<f64>> = (0..gh * gw)
                .map(|n| (0..y.c).map(|c| y.at(c, (n / gw) * hp + u, (n % gw) * wp + v)).collect())
                .collect();
            let t = transformer_tokens(store, &q, &tokens, depth, heads);
            for (n, tok) in t.iter().enumerate() {
                for c in 0..y.c {
                    *out.at_mut(c, (n / gw) * hp + u, (n % gw) * wp + v) = tok[c];
                }
            }
        }
    }
    conv_named(store, &format!("{q}.project"), &out, 1, 0)
}

pub fn fuse_block(store: &ParamStore, prefix: &str, x: &Map) -> Map {
    let y = conv_named(store, &format!("{prefix}.fuse.conv1"), x, 1, 1);
    let y = bn_eval(store, &format!("{prefix}.fuse.bn"), &y);
    conv_named(store, &format!("{prefix}.fuse.conv2"), &y, 1, 1).map(silu)
}

pub fn gip(store: &ParamStore, prefix: &str, x: &Map, patch: (usize, usize), depth: usize, heads: usize) -> Map {
    let s = |w: &str| p(store, &format!("{prefix}.{w}")).item();
    let mixed = dft_branch(store, prefix, x)
        .scale(s("w1"))
        .add(&x.scale(s("w2")))
        .add(&transformer_branch(store, prefix, x, patch, depth, heads).scale(s("w3")));
    fuse_block(store, prefix, &mixed)
}

pub fn embed(store: &ParamStore, name: &str, x: &Map) -> Map {
    let y = conv_named(store, &format!("{name}.pw"), x, 1, 0);
    let y = bn_eval(store, &format!("{name}.bn"), &y).map(silu);
    conv_named(store, &format!("{name}.conv"), &y, 1, 1)
}

pub fn sfm(store: &ParamStore, prefix: &str, f: &[Map]) -> Vec<Map> {
    let c = |n: &str, x: &Map| conv_named(store, &format!("{prefix}.{n}"), x, 1, 1);
    let up = |x: &Map, like: &Map| bilinear(x, like.h, like.w);
    let e3u = c("up3", &up(&f[3], &f[2]));
    let e2u = c("up2", &up(&e3u.add(&f[2]), &f[1]));
    let e1u = c("up1", &up(&e2u.add(&f[1]), &f[0]));
    let e2d = c("down2", &maxpool2(&f[0]));
    let e3d = c("down3", &maxpool2(&e2d.add(&f[1])));
    let e4d = c("down4", &maxpool2(&e3d.add(&f[2])));
    vec![e1u.add(&f[0]), e2u.add(&e2d), e3u.add(&e3d), f[3].add(&e4d)]
}

pub fn com(store: &ParamStore, e: &[Map], b: &[Map]) -> (Vec<Map>, Vec<Map>) {
    let mut eo = Vec::new();
    let mut bo = Vec::new();
    for j in 1..=4 {
        let we = p(store, &format!("com.we{j}")).data().to_vec();
        let wb = p(store, &format!("com.wb{j}")).data().to_vec();
        let (ej, bj) = (&e[j - 1], &b[j - 1]);
        let mut en = ej.scale(we[0]);
        let mut bn = bj.scale(wb[0]);
        for k in j..=4 {
            let gate = bilinear(&b[k - 1], ej.h, ej.w).map(sigmoid);
            en = en.add(&ej.mul(&gate).scale(we[k - j + 1]));
            bn = bn.add(&bj.add(&bilinear(&e[k - 1], bj.h, bj.w)).scale(wb[k - j + 1]));
        }
        eo.push(en);
        bo.push(bn);
    }
    (eo, bo)
}

pub fn ffm(store: &ParamStore, prefix: &str, primary: &[Map], secondary: Option<&[Map]>, xs: &Map) -> Map {
    let mut prev: Option<Map> = None;
    for j in (1..=4).rev() {
        let q = format!("{prefix}.l{j}");
        let mut parts: Vec<&Map> = Vec::new();
        if let Some(u) = &prev {
            parts.push(u);
        }
        parts.push(&primary[j - 1]);
        if let Some(s) = secondary {
            parts.push(&s[j - 1]);
        }
        let x = Map::concat(&parts);
        let x = conv_same(store, &format!("{q}.dw"), &x);
        let x = conv_named(store, &format!("{q}.conv"), &x, 1, 1);
        let x = bn_eval(store, &format!("{q}.bn"), &x).map(silu);
        prev = Some(if j > 1 { conv_t_named(store, &format!("{q}.up"), &x) } else { x });
    }
    let h = format!("{prefix}.head");
    let x = Map::concat(&[prev.as_ref().unwrap(), xs]);
    let x = conv_named(store, &format!("{h}.conv"), &x, 1, 1).map(silu);
    let x = conv_t_named(store, &format!("{h}.up1"), &x).map(silu);
    let x = conv_t_named(store, &format!("{h}.up2"), &x).map(silu);
    conv_named(store, &format!("{h}.out"), &x, 1, 0)
}

pub struct OracleOut {
    pub z_b_hat: Map,
    pub z_e: Option<Map>,
}

/// Whole-network inference on one image with default HFIE/GIP settings
/// (k1 = k2 = 8, 2×2 patches, two layers, four heads).
pub fn model_forward(store: &ParamStore, img: &Map, edge: bool, hfie_on: bool, gip_on: bool) -> OracleOut {
    let (xs, lv) = backbone(store, img);
    let body: Vec<Map> = (1..=4)
        .map(|k| {
            let b = embed(store, &format!("body_embed{k}"), &lv[k - 1]);
            if k >= 3 && gip_on {
                gip(store, &format!("gip{k}"), &b, (2, 2), 2, 4)
            } else {
                b
            }
        })
        .collect();
    let b1 = sfm(store, "sfm_body", &body);
    let sum = |a: &[Map], b: &[Map]| -> Vec<Map> { a.iter().zip(b).map(|(x, y)| x.add(y)).collect() };
    if !edge {
        let fused = sum(&b1, &body);
        return OracleOut { z_b_hat: ffm(store, "ffm_body", &fused, None, &xs), z_e: None };
    }
    let e0: Vec<Map> = (1..=4)
        .map(|k| {
            let mut x = lv[k - 1].clone();
            if k <= 2 && hfie_on {
                x = hfie(store, &format!("hfie{k}"), &x, 8, 8);
            }
            embed(store, &format!("edge_embed{k}"), &x)
        })
        .collect();
    let e1 = sfm(store, "sfm_edge", &e0);
    let (e2, b2) = com(store, &sum(&e1, &e0), &sum(&b1, &body));
    let ef = sum(&sum(&e2, &e1), &e0);
    let bf = sum(&sum(&b2, &b1), &body);
    OracleOut {
        z_b_hat: ffm(store, "ffm_body", &bf, Some(&ef), &xs),
        z_e: Some(ffm(store, "ffm_edge", &ef, Some(&bf), &xs)),
    }
}

// ---- metrics / losses -----------------------------------------------------------

pub fn iou_oracle(p: &[f64], g: &[f64], eps: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (a, b) in p.iter().zip(g) {
        let pred = *a >= 0.5;
        let gt = *b == 1.0;
        if pred && gt {
            tp += 1.0;
        } else if pred {
            fp += 1.0;
        } else if gt {
            fn_ += 1.0;
        }
    }
    (tp + eps) / (tp + fp + fn_ + eps)
}

pub fn dice_oracle(p: &[f64], g: &[f64], eps: f64) -> f64 {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut sg = 0.0;
    for (a, b) in p.iter().zip(g) {
        inter += a * b;
        sp += a;
        sg += b;
    }
    (2.0 * inter + eps) / (sp + sg + eps)
}

pub fn bce_oracle(p: &[f64], g: &[f64]) -> f64 {
    p.iter().zip(g).map(|(a, b)| if *b == 1.0 { -a.ln() } else { -(1.0 - a).ln() }).sum::<f64>() / p.len() as f64
}

/// Scharr magnitude with zero padding, written out tap by tap.
pub fn scharr_mag(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let v = |y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x[y as usize * w + xx as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let gx = 3.0 * (v(y - 1, xx + 1) - v(y - 1, xx - 1)) + 10.0 * (v(y, xx + 1) - v(y, xx - 1)) + 3.0 * (v(y + 1, xx + 1) - v(y + 1, xx - 1));
            let gy = 3.0 * (v(y + 1, xx - 1) - v(y - 1, xx - 1)) + 10.0 * (v(y + 1, xx) - v(y - 1, xx)) + 3.0 * (v(y + 1, xx + 1) - v(y - 1, xx + 1));
            out[y as usize * w + xx as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn numeric_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = f(&xp);
        xp.data_mut()[i] -= 2.0 * h;
        let fm = f(&xp);
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`.
pub fn rel_err(a: &Tensor, n: &Tensor) -> f64 {
    let diff = a.data().iter().zip(n.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-300)
}
