//! Edge/body embeddings, self-fusion, cross optimisation, dense phase
//! connections and the hierarchical fusion heads that emit full-resolution
//! logits.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Init, Session};

/// Four same-width feature maps at strides 4, 8, 16, 32.
pub type Levels = [Var; 4];

/// Edge and body streams of one decoder phase. `edge` is absent when the
/// edge stream is ablated.
#[derive(Clone, Debug)]
pub struct StageState {
    pub edge: Option<Levels>,
    pub body: Levels,
}

/// Final probability maps and the logits they come from.
#[derive(Clone, Debug)]
pub struct PredictionPair {
    /// Body logits after fusion with the edge logits.
    pub z_b: Var,
    pub z_b_hat: Var,
    pub z_e: Option<Var>,
    pub p_b: Var,
    pub p_e: Option<Var>,
}

pub fn init_embed(init: &mut Init, name: &str, cin: usize, ce: usize) {
    init.conv(&format!("{name}.pw"), cin, ce, 1, 1, true);
    init.batch_norm(&format!("{name}.bn"), ce);
    init.conv(&format!("{name}.conv"), ce, ce, 3, 1, true);
}

/// Point-wise conv → batch norm → SiLU → 3×3 conv.
pub fn embed_forward(s: &Session, name: &str, x: &Var) -> Result<Var> {
    let y = s.conv(&format!("{name}.pw"), x, 1, 0, 1)?;
    let y = s.batch_norm(&format!("{name}.bn"), &y)?;
    let y = s.graph().silu(&y);
    s.conv(&format!("{name}.conv"), &y, 1, 1, 1)
}

const SFM_CONVS: [&str; 6] = ["up3", "up2", "up1", "down2", "down3", "down4"];

pub fn init_sfm(init: &mut Init, prefix: &str, ce: usize) {
    for c in SFM_CONVS {
        init.conv(&format!("{prefix}.{c}"), ce, ce, 3, 1, true);
    }
}

fn resize_like(g: &Graph, x: &Var, like: &Var) -> Result<Var> {
    g.resize_bilinear(x, like.shape()[2], like.shape()[3])
}

/// Up branch walks 4→1, down branch walks 1→4; level outputs pair them.
pub fn sfm_forward(s: &Session, prefix: &str, f: &Levels) -> Result<Levels> {
    let g = s.graph();
    for k in 1..4 {
        let (a, b) = (f[k - 1].shape(), f[k].shape());
        if a[1] != b[1] || a[2] != 2 * b[2] || a[3] != 2 * b[3] {
            return Err(shape_err!("SFM level {} {:?} vs level {} {:?}", k, a, k + 1, b));
        }
    }
    let conv = |name: &str, x: &Var| s.conv(&format!("{prefix}.{name}"), x, 1, 1, 1);
    let e3u = conv("up3", &resize_like(g, &f[3], &f[2])?)?;
    let e2u = conv("up2", &resize_like(g, &g.add(&e3u, &f[2])?, &f[1])?)?;
    let e1u = conv("up1", &resize_like(g, &g.add(&e2u, &f[1])?, &f[0])?)?;
    let e2d = conv("down2", &g.max_pool2d(&f[0], 2, 2)?)?;
    let e3d = conv("down3", &g.max_pool2d(&g.add(&e2d, &f[1])?, 2, 2)?)?;
    let e4d = conv("down4", &g.max_pool2d(&g.add(&e3d, &f[2])?, 2, 2)?)?;
    Ok([
        g.add(&e1u, &f[0])?,
        g.add(&e2u, &e2d)?,
        g.add(&e3u, &e3d)?,
        g.add(&f[3], &e4d)?,
    ])
}

/// Initial COM weights for level `j` (1-based): self term 1.0, refinements 0.1.
pub fn com_initial_weights(j: usize) -> Vec<f64> {
    let mut w = vec![0.1; 6 - j];
    w[0] = 1.0;
    w
}

pub fn init_com(init: &mut Init) {
    for j in 1..=4 {
        init.vector(&format!("com.we{j}"), com_initial_weights(j));
        init.vector(&format!("com.wb{j}"), com_initial_weights(j));
    }
}

/// Body gates edge multiplicatively; edge joins body additively.
pub fn com_forward(s: &Session, e: &Levels, b: &Levels) -> Result<(Levels, Levels)> {
    let g = s.graph();
    let mut eo = Vec::with_capacity(4);
    let mut bo = Vec::with_capacity(4);
    for j in 1..=4 {
        let (we, wb) = (format!("com.we{j}"), format!("com.wb{j}"));
        for name in [&we, &wb] {
            let len = s.store().param(name).map(|t| t.numel());
            if len != Some(6 - j) {
                return Err(shape_err!("{name} has length {:?}, expected {}", len, 6 - j));
            }
        }
        let (ej, bj) = (&e[j - 1], &b[j - 1]);
        let mut et = vec![g.mul(ej, &s.param_elem(&we, 0)?)?];
        let mut bt = vec![g.mul(bj, &s.param_elem(&wb, 0)?)?];
        for k in j..=4 {
            let gate = g.sigmoid(&resize_like(g, &b[k - 1], ej)?);
            let e_hat = g.mul(ej, &gate)?;
            et.push(g.mul(&e_hat, &s.param_elem(&we, k - j + 1)?)?);
            let b_hat = g.add(bj, &resize_like(g, &e[k - 1], bj)?)?;
            bt.push(g.mul(&b_hat, &s.param_elem(&wb, k - j + 1)?)?);
        }
        eo.push(g.add_all(&et)?);
        bo.push(g.add_all(&bt)?);
    }
    Ok((eo.try_into().expect("four levels"), bo.try_into().expect("four levels")))
}

fn add_levels(g: &Graph, a: &Levels, b: &Levels) -> Result<Levels> {
    Ok([
        g.add(&a[0], &b[0])?,
        g.add(&a[1], &b[1])?,
        g.add(&a[2], &b[2])?,
        g.add(&a[3], &b[3])?,
    ])
}

/// Element-wise sum of `current` and every state in `history`.
pub fn dense_add(g: &Graph, current: &StageState, history: &[&StageState]) -> Result<StageState> {
    let mut out = current.clone();
    for h in history {
        out.body = add_levels(g, &out.body, &h.body)?;
        out.edge = match (&out.edge, &h.edge) {
            (Some(a), Some(b)) => Some(add_levels(g, a, b)?),
            (None, None) => None,
            _ => return Err(shape_err!("dense connection between states with and without an edge stream")),
        };
    }
    Ok(out)
}

/// Channel plan of one fusion head: `streams` maps are concatenated per level.
pub fn init_ffm(init: &mut Init, prefix: &str, ce: usize, cs: usize, dw_kernel: usize, streams: usize) {
    for j in (1..=4).rev() {
        let cin = if j == 4 { streams * ce } else { (streams + 1) * ce };
        let p = format!("{prefix}.l{j}");
        init.depthwise(&format!("{p}.dw"), cin, dw_kernel);
        init.conv(&format!("{p}.conv"), cin, ce, 3, 1, true);
        init.batch_norm(&format!("{p}.bn"), ce);
        if j > 1 {
            init.conv_transpose(&format!("{p}.up"), ce, ce, 2);
        }
    }
    let h = format!("{prefix}.head");
    init.conv(&format!("{h}.conv"), ce + cs, ce, 3, 1, true);
    init.conv_transpose(&format!("{h}.up1"), ce, ce / 2, 2);
    init.conv_transpose(&format!("{h}.up2"), ce / 2, ce / 4, 2);
    init.conv(&format!("{h}.out"), ce / 4, 1, 1, 1, true);
}

/// Coarse-to-fine fusion. `primary` leads each per-level concatenation,
/// `secondary` (the other stream, if any) follows it.
pub fn ffm_forward(s: &Session, prefix: &str, primary: &Levels, secondary: Option<&Levels>, x_s: &Var) -> Result<Var> {
    let g = s.graph();
    let mut prev: Option<Var> = None;
    for j in (1..=4).rev() {
        let p = format!("{prefix}.l{j}");
        let mut parts = Vec::with_capacity(3);
        if let Some(u) = &prev {
            parts.push(u.clone());
        }
        parts.push(primary[j - 1].clone());
        if let Some(sec) = secondary {
            parts.push(sec[j - 1].clone());
        }
        let x = g.concat(&parts, 1)?;
        let x = s.conv_same(&format!("{p}.dw"), &x)?;
        let x = s.conv(&format!("{p}.conv"), &x, 1, 1, 1)?;
        let x = g.silu(&s.batch_norm(&format!("{p}.bn"), &x)?);
        s.tap(&p, &x);
        prev = Some(if j > 1 { s.conv_transpose(&format!("{p}.up"), &x, 2)? } else { x });
    }
    let h = format!("{prefix}.head");
    let x = g.concat(&[prev.expect("level 1 output"), x_s.clone()], 1)?;
    let x = g.silu(&s.conv(&format!("{h}.conv"), &x, 1, 1, 1)?);
    let x = g.silu(&s.conv_transpose(&format!("{h}.up1"), &x, 2)?);
    let x = g.silu(&s.conv_transpose(&format!("{h}.up2"), &x, 2)?);
    s.conv(&format!("{h}.out"), &x, 1, 0, 1)
}

/// `p_b = σ(ẑ_b + z_e)`, `p_e = σ(z_e)`; without an edge stream `p_b = σ(ẑ_b)`.
pub fn final_fuse(g: &Graph, z_b_hat: &Var, z_e: Option<&Var>) -> Result<PredictionPair> {
    let z_b = match z_e {
        Some(ze) => {
            if ze.shape() != z_b_hat.shape() {
                return Err(shape_err!("logit maps {:?} vs {:?}", z_b_hat.shape(), ze.shape()));
            }
            g.add(z_b_hat, ze)?
        }
        None => z_b_hat.clone(),
    };
    Ok(PredictionPair {
        p_b: g.sigmoid(&z_b),
        p_e: z_e.map(|z| g.sigmoid(z)),
        z_b,
        z_b_hat: z_b_hat.clone(),
        z_e: z_e.cloned(),
    })
}
