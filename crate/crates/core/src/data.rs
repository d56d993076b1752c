//! Dataset layout `root/{split}/{images,masks}/<id>.png`, edge labels,
//! flip/rotation augmentation and a seeded synthetic crack generator.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const MASK_THRESHOLD: u8 = 127;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` binary crack mask.
    pub g_b: Tensor,
    /// `[1, H, W]` binary boundary band.
    pub g_e: Tensor,
}

impl SampleRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    #[serde(default)]
    pub expected_count: Option<usize>,
    #[serde(default)]
    pub size: Option<usize>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: &str) -> Self {
        Self {
            root: root.into(),
            split: split.to_string(),
            expected_count: None,
            size: None,
        }
    }

    /// The published steel-crack splits: 3300 / 525 / 530 images of 512².
    pub fn steelcrack(root: impl Into<PathBuf>, split: &str) -> Result<Self> {
        let expected = match split {
            "train" => 3300,
            "val" => 525,
            "test" => 530,
            _ => return Err(Error::Dataset(format!("unknown split {split:?}"))),
        };
        Ok(Self {
            root: root.into(),
            split: split.to_string(),
            expected_count: Some(expected),
            size: Some(512),
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn split_dir(&self) -> PathBuf {
        self.root.join(&self.split)
    }
}

fn plane_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [1, h, w] | [h, w] => Ok((*h, *w)),
        s => Err(shape_err!("expected a single-channel map, got {:?}", s)),
    }
}

fn morph(src: &[bool], h: usize, w: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = !dilate;
            for yy in y.saturating_sub(1)..(y + 2).min(h) {
                for xx in x.saturating_sub(1)..(x + 2).min(w) {
                    if dilate {
                        acc |= src[yy * w + xx];
                    } else {
                        acc &= src[yy * w + xx];
                    }
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Morphological gradient: `dilate(g_b) XOR erode(g_b)` with a 3×3 square
/// element applied `width` times. Only in-image neighbours are considered, so
/// the image border itself is never marked as a boundary.
pub fn derive_edge_label(g_b: &Tensor, width: usize) -> Result<Tensor> {
    let (h, w) = plane_dims(g_b)?;
    let width = width.max(1);
    let mask: Vec<bool> = g_b.data().iter().map(|&v| v > 0.5).collect();
    let (mut d, mut e) = (mask.clone(), mask);
    for _ in 0..width {
        d = morph(&d, h, w, true);
        e = morph(&e, h, w, false);
    }
    Tensor::new(
        g_b.shape(),
        d.iter().zip(&e).map(|(a, b)| if a ^ b { 1.0 } else { 0.0 }).collect(),
    )
}

/// Flip/rotation choices; rotations are counter-clockwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Self::Identity,
        Self::HFlip,
        Self::VFlip,
        Self::Rot90,
        Self::Rot180,
        Self::Rot270,
    ];

    pub fn draw(seed: u64) -> Self {
        Self::ALL[ChaCha8Rng::seed_from_u64(seed).gen_range(0..Self::ALL.len())]
    }

    /// Apply to every `[H, W]` plane of a `[C, H, W]` tensor.
    pub fn apply(self, t: &Tensor) -> Tensor {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let (oh, ow) = match self {
            Self::Rot90 | Self::Rot270 => (w, h),
            _ => (h, w),
        };
        let src = |y: usize, x: usize| -> (usize, usize) {
            match self {
                Self::Identity => (y, x),
                Self::HFlip => (y, w - 1 - x),
                Self::VFlip => (h - 1 - y, x),
                Self::Rot90 => (x, w - 1 - y),
                Self::Rot180 => (h - 1 - y, w - 1 - x),
                Self::Rot270 => (h - 1 - x, y),
            }
        };
        let mut out = Tensor::zeros(&[c, oh, ow]);
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let (sy, sx) = src(y, x);
                    out.data_mut()[(ci * oh + y) * ow + x] = t.data()[(ci * h + sy) * w + sx];
                }
            }
        }
        out
    }
}

/// Apply one seeded flip/rotation identically to image and both labels.
pub fn augment(s: &SampleRecord, seed: u64) -> SampleRecord {
    let a = Augmentation::draw(seed);
    SampleRecord {
        id: s.id.clone(),
        image: a.apply(&s.image),
        g_b: a.apply(&s.g_b),
        g_e: a.apply(&s.g_e),
    }
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.data_mut()[(c * h + y as usize) * w + x as usize] = p[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn read_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Tensor::new(
        &[1, h, w],
        img.pixels().map(|p| if p[0] > MASK_THRESHOLD { 1.0 } else { 0.0 }).collect(),
    )
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn image_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(shape_err!("expected [3,H,W], got {:?}", s)),
    };
    if c != 3 {
        return Err(shape_err!("expected 3 channels, got {c}"));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| to_u8(t.data()[(ch * h + y as usize) * w + x as usize]);
        image::Rgb([px(0), px(1), px(2)])
    }))
}

pub fn mask_to_gray(t: &Tensor) -> Result<GrayImage> {
    let (h, w) = plane_dims(t)?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if t.data()[y as usize * w + x as usize] > 0.5 { 255 } else { 0 }])
    }))
}

/// Load one split, sorted by id. A count or size mismatch against the
/// manifest is logged, not fatal.
pub fn load_dataset(manifest: &DatasetManifest, edge_width: usize) -> Result<Vec<SampleRecord>> {
    let dir = manifest.split_dir();
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    if !img_dir.is_dir() {
        return Err(Error::Dataset(format!("missing image directory {}", img_dir.display())));
    }
    let mut ids: Vec<String> = fs::read_dir(&img_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|s| s.to_str()).is_some_and(|s| s.eq_ignore_ascii_case("png")))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    ids.sort();
    if ids.is_empty() {
        log::warn!("no images found in {}", img_dir.display());
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mask_path = mask_dir.join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::Dataset(format!("missing mask for image id {id:?}")));
        }
        let image = read_image(&img_dir.join(format!("{id}.png")))?;
        let g_b = read_mask(&mask_path)?;
        if g_b.shape()[1..] != image.shape()[1..] {
            return Err(Error::Dataset(format!("mask size differs from image size for {id:?}")));
        }
        if let Some(sz) = manifest.size {
            if image.shape()[1] != sz || image.shape()[2] != sz {
                log::warn!("{id}: expected {sz}x{sz}, found {:?}", &image.shape()[1..]);
            }
        }
        let g_e = derive_edge_label(&g_b, edge_width)?;
        out.push(SampleRecord { id, image, g_b, g_e });
    }
    if let Some(n) = manifest.expected_count {
        if n != out.len() {
            log::warn!("split {}: expected {n} records, found {}", manifest.split, out.len());
        }
    }
    Ok(out)
}

/// Write records in the dataset layout (RGB images, 0/255 masks).
pub fn dump_split(records: &[SampleRecord], root: &Path, split: &str) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    for r in records {
        image_to_rgb(&r.image)?.save(dir.join("images").join(format!("{}.png", r.id)))?;
        mask_to_gray(&r.g_b)?.save(dir.join("masks").join(format!("{}.png", r.id)))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub size: usize,
    /// Inclusive range of cracks per image.
    pub crack_count: (usize, usize),
    /// Range of crack widths in pixels.
    pub width: (f64, f64),
    /// Amplitude of the low-frequency background texture.
    pub noise_scale: f64,
    pub seed: u64,
    pub edge_width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            size: 64,
            crack_count: (1, 3),
            width: (1.0, 3.0),
            noise_scale: 0.08,
            seed: 0,
            edge_width: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 32 != 0 {
            return Err(Error::Config(format!("synthetic size must be a multiple of 32, got {}", self.size)));
        }
        if self.width.0 < 1.0 || self.width.1 < self.width.0 {
            return Err(Error::Config(format!("crack widths must satisfy 1 <= min <= max, got {:?}", self.width)));
        }
        if self.crack_count.1 < self.crack_count.0 {
            return Err(Error::Config(format!("bad crack count range {:?}", self.crack_count)));
        }
        Ok(())
    }
}

fn seg_dist2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let l2 = dx * dx + dy * dy;
    let t = if l2 > 0.0 { (((px - a.0) * dx + (py - a.1) * dy) / l2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    (px - qx).powi(2) + (py - qy).powi(2)
}

fn background(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    let cells = 5;
    let grid: Vec<f64> = (0..cells * cells).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let base = rng.gen_range(0.45..0.7);
    let mut out = vec![0.0; n * n];
    let step = (n - 1) as f64 / (cells - 1) as f64;
    for y in 0..n {
        for x in 0..n {
            let (gy, gx) = (y as f64 / step, x as f64 / step);
            let (y0, x0) = ((gy.floor() as usize).min(cells - 2), (gx.floor() as usize).min(cells - 2));
            let (ty, tx) = (gy - y0 as f64, gx - x0 as f64);
            let v = grid[y0 * cells + x0] * (1.0 - ty) * (1.0 - tx)
                + grid[y0 * cells + x0 + 1] * (1.0 - ty) * tx
                + grid[(y0 + 1) * cells + x0] * ty * (1.0 - tx)
                + grid[(y0 + 1) * cells + x0 + 1] * ty * tx;
            let grain = rng.gen_range(-1.0..1.0) * 0.25 * scale;
            out[y * n + x] = base + scale * v + grain;
        }
    }
    out
}

fn rasterize_crack(rng: &mut ChaCha8Rng, n: usize, width: f64, mask: &mut [bool]) {
    let nf = n as f64;
    let mut p = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let segments = rng.gen_range(4..10);
    let r = width / 2.0;
    for _ in 0..segments {
        heading += rng.gen_range(-0.6..0.6);
        let len = rng.gen_range(nf / 10.0..nf / 4.0);
        let q = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        let (x0, x1) = (p.0.min(q.0) - r - 1.0, p.0.max(q.0) + r + 1.0);
        let (y0, y1) = (p.1.min(q.1) - r - 1.0, p.1.max(q.1) + r + 1.0);
        let clampi = |v: f64| v.clamp(0.0, nf - 1.0) as usize;
        for y in clampi(y0)..=clampi(y1) {
            for x in clampi(x0)..=clampi(x1) {
                if seg_dist2(x as f64 + 0.5, y as f64 + 0.5, p, q) <= r * r {
                    mask[y * n + x] = true;
                }
            }
        }
        p = q;
    }
}

/// One synthetic image; deterministic in `(cfg.seed, index)`.
pub fn synthetic_sample(cfg: &SynthConfig, index: usize) -> Result<SampleRecord> {
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let bg = background(&mut rng, n, cfg.noise_scale);
    let tint = [rng.gen_range(0.95..1.05), 1.0, rng.gen_range(0.95..1.05)];
    let mut mask = vec![false; n * n];
    let count = rng.gen_range(cfg.crack_count.0..=cfg.crack_count.1);
    for _ in 0..count {
        let w = rng.gen_range(cfg.width.0..=cfg.width.1);
        rasterize_crack(&mut rng, n, w, &mut mask);
    }
    let depth = rng.gen_range(0.45..0.75);
    let mut image = Tensor::zeros(&[3, n, n]);
    for c in 0..3 {
        for i in 0..n * n {
            let mut v = bg[i] * tint[c];
            if mask[i] {
                v *= 1.0 - depth;
            }
            // quantise so a PNG round trip is exact
            image.data_mut()[c * n * n + i] = to_u8(v) as f64 / 255.0;
        }
    }
    let g_b = Tensor::new(&[1, n, n], mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())?;
    let g_e = derive_edge_label(&g_b, cfg.edge_width)?;
    Ok(SampleRecord {
        id: format!("synth_{index:05}"),
        image,
        g_b,
        g_e,
    })
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    (0..cfg.n_images).map(|i| synthetic_sample(cfg, i)).collect()
}

/// Stack records into `[N,3,H,W]` images and `[N,1,H,W]` body/edge labels.
pub fn collate(records: &[&SampleRecord]) -> Result<(Tensor, Tensor, Tensor)> {
    let imgs: Vec<Tensor> = records.iter().map(|r| r.image.clone()).collect();
    let gb: Vec<Tensor> = records.iter().map(|r| r.g_b.clone()).collect();
    let ge: Vec<Tensor> = records.iter().map(|r| r.g_e.clone()).collect();
    Ok((Tensor::stack(&imgs)?, Tensor::stack(&gb)?, Tensor::stack(&ge)?))
}
