//! Full network: backbone → frequency/global enhancement → two-stream decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backbone::{backbone_forward, init_backbone, BackboneConfig};
use crate::decoder::{
    com_forward, dense_add, embed_forward, ffm_forward, final_fuse, init_com, init_embed, init_ffm, init_sfm,
    sfm_forward, PredictionPair, StageState,
};
use crate::error::{Error, Result};
use crate::gip::{gip_forward, init_gip, GipConfig};
use crate::hfie::{hfie_forward, init_hfie, HfieConfig};
use crate::nn::{Init, ParamStore, Session};

/// Switches that remove whole components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Drop the edge stream: HFIE, edge embeddings, edge SFM, COM and the edge head.
    pub no_edge: bool,
    pub no_hfie: bool,
    pub no_gip: bool,
    /// Drop the gradient (Scharr/Charbonnier) loss term. Has no effect on parameters.
    pub no_grad_loss: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub embed_channels: usize,
    pub hfie: HfieConfig,
    pub gip: GipConfig,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            embed_channels: 32,
            hfie: HfieConfig::default(),
            gip: GipConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let ce = self.embed_channels;
        if ce < 4 || ce % 4 != 0 {
            return Err(Error::Config(format!("embed_channels must be a positive multiple of 4, got {ce}")));
        }
        let ch = self.backbone.stage_channels;
        if self.uses_hfie() {
            self.hfie.validate(ch[0])?;
            self.hfie.validate(ch[1])?;
        }
        if !self.ablation.no_gip {
            self.gip.validate(ce)?;
        }
        Ok(())
    }

    pub fn uses_edge(&self) -> bool {
        !self.ablation.no_edge
    }

    pub fn uses_hfie(&self) -> bool {
        self.uses_edge() && !self.ablation.no_hfie
    }
}

/// Network parameters together with the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct BgCrack {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl BgCrack {
    /// Freshly initialised model; identical seeds give identical weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let cfg = &config;
        let ce = cfg.embed_channels;
        let ch = cfg.backbone.stage_channels;
        let cs = cfg.backbone.stem_channels;
        let dw = cfg.backbone.dw_kernel;
        init_backbone(&mut init, &cfg.backbone);
        if cfg.uses_hfie() {
            init_hfie(&mut init, "hfie1", ch[0], &cfg.hfie);
            init_hfie(&mut init, "hfie2", ch[1], &cfg.hfie);
        }
        for k in 1..=4 {
            if cfg.uses_edge() {
                init_embed(&mut init, &format!("edge_embed{k}"), ch[k - 1], ce);
            }
            init_embed(&mut init, &format!("body_embed{k}"), ch[k - 1], ce);
        }
        if !cfg.ablation.no_gip {
            init_gip(&mut init, "gip3", ce, &cfg.gip);
            init_gip(&mut init, "gip4", ce, &cfg.gip);
        }
        init_sfm(&mut init, "sfm_body", ce);
        if cfg.uses_edge() {
            init_sfm(&mut init, "sfm_edge", ce);
            init_com(&mut init);
            init_ffm(&mut init, "ffm_body", ce, cs, dw, 2);
            init_ffm(&mut init, "ffm_edge", ce, cs, dw, 2);
        } else {
            init_ffm(&mut init, "ffm_body", ce, cs, dw, 1);
        }
        Ok(Self { config, store })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Forward an `[N, 3, H, W]` batch with pixel values in `[0, 1]`.
    pub fn forward(&self, s: &Session, img: &Var) -> Result<PredictionPair> {
        let cfg = &self.config;
        let g = s.graph();
        let pyr = backbone_forward(s, img)?;
        let lv = &pyr.levels;

        let mut body = Vec::with_capacity(4);
        for k in 1..=4 {
            let mut b = embed_forward(s, &format!("body_embed{k}"), &lv[k - 1])?;
            if k >= 3 && !cfg.ablation.no_gip {
                b = gip_forward(s, &format!("gip{k}"), &b, &cfg.gip)?;
            }
            s.tap(&format!("body{k}"), &b);
            body.push(b);
        }
        let body: [Var; 4] = body.try_into().expect("four levels");

        let edge = if cfg.uses_edge() {
            let mut edge = Vec::with_capacity(4);
            for k in 1..=4 {
                let mut x = lv[k - 1].clone();
                if k <= 2 && cfg.uses_hfie() {
                    x = hfie_forward(s, &format!("hfie{k}"), &x, &cfg.hfie)?;
                    s.tap(&format!("hfie{k}"), &x);
                }
                let e = embed_forward(s, &format!("edge_embed{k}"), &x)?;
                s.tap(&format!("edge{k}"), &e);
                edge.push(e);
            }
            Some(edge.try_into().expect("four levels"))
        } else {
            None
        };

        let s0 = StageState { edge, body };
        let s1 = StageState {
            body: sfm_forward(s, "sfm_body", &s0.body)?,
            edge: match &s0.edge {
                Some(e) => Some(sfm_forward(s, "sfm_edge", e)?),
                None => None,
            },
        };
        let fused = match &s1.edge {
            Some(_) => {
                let com_in = dense_add(g, &s1, &[&s0])?;
                let (e2, b2) = com_forward(s, com_in.edge.as_ref().expect("edge stream"), &com_in.body)?;
                let s2 = StageState { edge: Some(e2), body: b2 };
                dense_add(g, &s2, &[&s1, &s0])?
            }
            None => dense_add(g, &s1, &[&s0])?,
        };

        let z_b_hat = ffm_forward(s, "ffm_body", &fused.body, fused.edge.as_ref(), &pyr.x_s)?;
        let z_e = match &fused.edge {
            Some(e) => Some(ffm_forward(s, "ffm_edge", e, Some(&fused.body), &pyr.x_s)?),
            None => None,
        };
        final_fuse(g, &z_b_hat, z_e.as_ref())
    }
}
