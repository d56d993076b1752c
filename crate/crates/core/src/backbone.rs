//! Stem plus four conv blocks producing a stride-4..32 feature pyramid.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Init, Session};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub dw_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stage_channels: [32, 64, 96, 128],
            dw_kernel: 7,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dw_kernel != 7 {
            return Err(Error::Config(format!("dw_kernel must be 7, got {}", self.dw_kernel)));
        }
        if self.stem_channels == 0 || !self.stage_channels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "stage channels must be strictly increasing, got {:?}",
                self.stage_channels
            )));
        }
        Ok(())
    }
}

/// Stem output `x_s` (stride 4) and levels 1..4 (strides 4, 8, 16, 32).
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub x_s: Var,
    pub levels: [Var; 4],
}

pub fn init_backbone(init: &mut Init, cfg: &BackboneConfig) {
    let k = cfg.dw_kernel;
    init.conv("backbone.stem.conv", 3, cfg.stem_channels, 3, 1, true);
    init.depthwise("backbone.stem.dw", cfg.stem_channels, k);
    let mut cin = cfg.stem_channels;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let p = format!("backbone.block{}", i + 1);
        init.conv(&format!("{p}.conv"), cin, c, 3, 1, true);
        init.batch_norm(&format!("{p}.bn"), c);
        init.depthwise(&format!("{p}.dw"), c, k);
        cin = c;
    }
}

/// Reject images whose sides do not survive five halvings.
pub fn check_geometry(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Geometry(format!("expected [N,3,H,W] image batch, got {:?}", shape)));
    }
    let (h, w) = (shape[2], shape[3]);
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Geometry(format!("image sides must be positive multiples of 32, got {h}x{w}")));
    }
    Ok(())
}

/// conv 3×3 stride 2 → depth-wise conv → 2×2 max-pool.
pub fn stem_forward(s: &Session, img: &Var) -> Result<Var> {
    check_geometry(img.shape())?;
    let x = s.conv("backbone.stem.conv", img, 2, 1, 1)?;
    let x = s.conv_same("backbone.stem.dw", &x)?;
    s.graph().max_pool2d(&x, 2, 2)
}

/// conv 3×3 → batch norm → depth-wise conv → SiLU.
pub fn conv_block_forward(s: &Session, prefix: &str, x: &Var) -> Result<Var> {
    let y = s.conv(&format!("{prefix}.conv"), x, 1, 1, 1)?;
    let y = s.batch_norm(&format!("{prefix}.bn"), &y)?;
    let y = s.conv_same(&format!("{prefix}.dw"), &y)?;
    Ok(s.graph().silu(&y))
}

pub fn backbone_forward(s: &Session, img: &Var) -> Result<Pyramid> {
    let x_s = stem_forward(s, img)?;
    s.tap("stem", &x_s);
    let mut cur = x_s.clone();
    let mut levels = Vec::with_capacity(4);
    for k in 1..=4 {
        if k > 1 {
            cur = s.graph().max_pool2d(&cur, 2, 2)?;
        }
        cur = conv_block_forward(s, &format!("backbone.block{k}"), &cur)?;
        s.tap(&format!("backbone.block{k}"), &cur);
        levels.push(cur.clone());
    }
    let levels: [Var; 4] = levels.try_into().expect("four levels");
    Ok(Pyramid { x_s, levels })
}
