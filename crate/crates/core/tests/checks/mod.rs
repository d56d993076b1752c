//! Criterion-level checks shared by the acceptance runner and the regular
//! integration tests. Each returns a short detail line, or the reason it
//! failed.
#![allow(dead_code)]

use std::time::Instant;

use bgcrack::autograd::{Graph, Var};
use bgcrack::backbone::BackboneConfig;
use bgcrack::data::{
    augment, derive_edge_label, dump_split, generate_synthetic, load_dataset, DatasetManifest, SampleRecord, SynthConfig,
};
use bgcrack::decoder::com_forward;
use bgcrack::gip::{fold, fold_patches, gip_forward, init_gip, irfft2, rfft2, transformer_forward, unfold, unfold_patches, GipConfig};
use bgcrack::hfie::{dct_basis_1d, hfie_forward, init_hfie, spatial_freq_enhance, HfieConfig};
use bgcrack::losses::{bce_logits, bce_loss, bce_prob, dice, dice_loss, grad_charbonnier, grad_loss, total_loss, LossConfig};
use bgcrack::metrics::{count_macs, count_params, image_dice, mi_dice, mi_iou, METRIC_EPS};
use bgcrack::model::Ablation;
use bgcrack::nn::{Init, ParamStore, Session};
use bgcrack::train::{evaluate_records, train, TrainConfig};
use bgcrack::{BgCrack, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::common::*;

pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within_budget(started: Instant, secs: f64, what: &str) -> Result<f64, String> {
    let t = started.elapsed().as_secs_f64();
    ensure!(t < secs, "{what} took {t:.1}s, budget {secs}s");
    Ok(t)
}

// ---- fixtures -----------------------------------------------------------------

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { stem_channels: 8, stage_channels: [8, 16, 24, 32], dw_kernel: 7 },
        embed_channels: 16,
        ..Default::default()
    }
}

pub fn tiny_model(seed: u64) -> BgCrack {
    let mut m = BgCrack::new(tiny_config(), seed).unwrap();
    perturb_params(&mut m.store, seed + 100, 0.2);
    perturb_buffers(&mut m.store, seed + 200);
    m
}

pub fn store_with(seed: u64, f: impl FnOnce(&mut Init)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f(&mut Init { store: &mut store, rng: &mut rng });
    perturb_params(&mut store, seed + 1, 0.2);
    perturb_buffers(&mut store, seed + 2);
    store
}

pub fn hfie_store(seed: u64, c: usize) -> (ParamStore, HfieConfig) {
    let cfg = HfieConfig::default();
    (store_with(seed, |i| init_hfie(i, "h", c, &cfg)), cfg)
}

pub fn gip_store(seed: u64, c: usize) -> (ParamStore, GipConfig) {
    let cfg = GipConfig::default();
    (store_with(seed, |i| init_gip(i, "g", c, &cfg)), cfg)
}

/// `sum(v ⊙ w)` with fixed, non-symmetric weights so every output element
/// reaches the gradient.
pub fn project(g: &Graph, v: &Var) -> Var {
    let w = Tensor::from_fn(v.shape(), |i| ((i as f64) * 0.618 + 0.3).sin());
    g.sum_all(&g.mul(v, &g.constant(w)).unwrap())
}

// ---- finite differences -------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct GradReport {
    pub input: f64,
    pub params: f64,
    pub checked: usize,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.input.max(self.params)
    }
}

/// Compare backprop against central differences for a scalar `f(session,
/// input)`. With `samples = Some(k)`, only `k` random input entries and `k`
/// random parameter entries are checked; otherwise every entry is.
pub fn grad_check(
    store: &ParamStore,
    x: &Tensor,
    train_mode: bool,
    samples: Option<usize>,
    seed: u64,
    h: f64,
    f: impl Fn(&Session, &Var) -> Var,
) -> GradReport {
    let s = Session::new(store, Graph::new(), train_mode);
    let xv = s.graph().leaf(x.clone());
    let out = f(&s, &xv);
    assert_eq!(out.value().numel(), 1, "gradient check needs a scalar");
    let grads = s.graph().backward(&out).unwrap();
    let gx = grads.get_or_zeros(&xv);
    let pg = s.param_grads(&grads);

    let eval = |store: &ParamStore, x: &Tensor| -> f64 {
        let s = Session::new(store, Graph::no_grad(), train_mode);
        let xv = s.graph().constant(x.clone());
        f(&s, &xv).value().item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let input_idx: Vec<usize> = match samples {
        Some(k) => (0..k).map(|_| rng.gen_range(0..x.numel())).collect(),
        None => (0..x.numel()).collect(),
    };
    let (mut a_in, mut n_in) = (Vec::new(), Vec::new());
    for &i in &input_idx {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = eval(store, &xp);
        xp.data_mut()[i] -= 2.0 * h;
        let fm = eval(store, &xp);
        a_in.push(gx.data()[i]);
        n_in.push((fp - fm) / (2.0 * h));
    }

    let names: Vec<&String> = pg.keys().collect();
    let param_idx: Vec<(String, usize)> = match samples {
        Some(k) => (0..k)
            .map(|_| {
                let n = names[rng.gen_range(0..names.len())];
                (n.clone(), rng.gen_range(0..pg[n].numel()))
            })
            .collect(),
        None => names.iter().flat_map(|n| (0..pg[*n].numel()).map(move |i| ((*n).clone(), i))).collect(),
    };
    let (mut a_p, mut n_p) = (Vec::new(), Vec::new());
    let mut work = store.clone();
    for (name, i) in &param_idx {
        let orig = work.param(name).unwrap().data()[*i];
        work.param_mut(name).unwrap().data_mut()[*i] = orig + h;
        let fp = eval(&work, x);
        work.param_mut(name).unwrap().data_mut()[*i] = orig - h;
        let fm = eval(&work, x);
        work.param_mut(name).unwrap().data_mut()[*i] = orig;
        a_p.push(pg[name].data()[*i]);
        n_p.push((fp - fm) / (2.0 * h));
    }
    let vec_err = |a: Vec<f64>, n: Vec<f64>| -> f64 {
        if a.is_empty() {
            return 0.0;
        }
        let len = a.len();
        rel_err(&Tensor::new(&[len], a).unwrap(), &Tensor::new(&[len], n).unwrap())
    };
    GradReport {
        checked: input_idx.len() + param_idx.len(),
        input: vec_err(a_in, n_in),
        params: vec_err(a_p, n_p),
    }
}

/// Relative error of the gradient of a parameter-free scalar `f(x)`.
pub fn input_grad_err(x: &Tensor, h: f64, f: impl Fn(&Graph, &Var) -> Var) -> f64 {
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let out = f(&g, &xv);
    let analytic = g.backward(&out).unwrap().get_or_zeros(&xv);
    let numeric = numeric_grad(x, h, |xp| {
        let g = Graph::no_grad();
        f(&g, &g.constant(xp.clone())).value().item()
    });
    rel_err(&analytic, &numeric)
}

pub fn hfie_grad() -> GradReport {
    let (store, cfg) = hfie_store(3, 8);
    let x = rand_tensor(&[2, 8, 4, 4], 4, -1.0, 1.0);
    grad_check(&store, &x, true, None, 5, 1e-5, |s, x| project(s.graph(), &hfie_forward(s, "h", x, &cfg).unwrap()))
}

pub fn gip_grad() -> GradReport {
    let (store, cfg) = gip_store(6, 4);
    let x = rand_tensor(&[1, 4, 8, 8], 7, -1.0, 1.0);
    grad_check(&store, &x, true, None, 8, 1e-5, |s, x| project(s.graph(), &gip_forward(s, "g", x, &cfg).unwrap()))
}

/// `(name, relative error, tolerance)` for every loss term.
pub fn loss_grads() -> Vec<(&'static str, f64, f64)> {
    let p = rand_tensor(&[2, 1, 6, 6], 11, 0.05, 0.95);
    let z = rand_tensor(&[2, 1, 6, 6], 12, -3.0, 3.0);
    let t = Tensor::from_fn(&[2, 1, 6, 6], |i| if (i * 7 + i / 6) % 3 == 0 { 1.0 } else { 0.0 });
    let cfg = LossConfig::default();
    let te = t.map(|v| 1.0 - v);
    vec![
        ("bce_prob", input_grad_err(&p, 1e-6, |g, v| bce_prob(g, v, &t).unwrap()), 1e-6),
        ("bce_logits", input_grad_err(&z, 1e-5, |g, v| bce_logits(g, v, &t).unwrap()), 1e-6),
        ("dice", input_grad_err(&p, 1e-5, |g, v| dice(g, v, &t, cfg.eps_dice).unwrap()), 1e-6),
        ("grad_charbonnier", input_grad_err(&p, 1e-6, |g, v| grad_charbonnier(g, v, &t, cfg.eps_char).unwrap()), 1e-4),
        (
            "total",
            input_grad_err(&z, 1e-5, |g, v| {
                let ze = g.scale(v, -0.7);
                let pred = bgcrack::decoder::final_fuse(g, v, Some(&ze)).unwrap();
                total_loss(g, &pred, &t, &te, &cfg, true).unwrap().0
            }),
            1e-4,
        ),
    ]
}

/// Full objective of the default-width model on one `[3, 32, 32]` image.
pub fn end_to_end_grad(train_mode: bool, samples: usize) -> GradReport {
    let mut model = BgCrack::new(ModelConfig::default(), 21).unwrap();
    perturb_params(&mut model.store, 22, 0.05);
    perturb_buffers(&mut model.store, 23);
    let x = rand_tensor(&[1, 3, 32, 32], 24, 0.0, 1.0);
    let gb = Tensor::from_fn(&[1, 1, 32, 32], |i| if (i % 32).abs_diff(i / 32) <= 1 { 1.0 } else { 0.0 });
    let ge = derive_edge_label(&gb.clone().reshape(&[1, 32, 32]).unwrap(), 1).unwrap().reshape(&[1, 1, 32, 32]).unwrap();
    let cfg = LossConfig::default();
    grad_check(&model.store, &x, train_mode, Some(samples), 25, 1e-6, |s, x| {
        let pred = model.forward(s, x).unwrap();
        total_loss(s.graph(), &pred, &gb, &ge, &cfg, true).unwrap().0
    })
}

// ---- criteria -----------------------------------------------------------------

pub fn metric_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for _ in 0..1000 {
        preds.push(Tensor::from_fn(&[8, 8], |_| rng.gen_range(0.0..1.0)));
        let rate = rng.gen_range(0.0..0.6);
        gts.push(Tensor::from_fn(&[8, 8], |_| if rng.gen_bool(rate) { 1.0 } else { 0.0 }));
    }
    let n = preds.len() as f64;
    let oi = preds.iter().zip(&gts).map(|(p, g)| iou_oracle(p.data(), g.data(), 1e-6)).sum::<f64>() / n;
    let od = preds.iter().zip(&gts).map(|(p, g)| dice_oracle(p.data(), g.data(), 1e-6)).sum::<f64>() / n;
    let (li, ld) = (mi_iou(&preds, &gts, METRIC_EPS).map_err(|e| e.to_string())?, mi_dice(&preds, &gts, METRIC_EPS).map_err(|e| e.to_string())?);
    ensure!((li - oi).abs() <= 1e-9, "mi IoU {li} vs oracle {oi}");
    ensure!((ld - od).abs() <= 1e-9, "mi Dice {ld} vs oracle {od}");
    let hand = mi_iou(
        &[Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap()],
        &[Tensor::new(&[2, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap()],
        METRIC_EPS,
    )
    .unwrap();
    ensure!((hand - 0.333334).abs() < 1e-6, "hand case gave {hand}");
    let ex = image_dice(&Tensor::new(&[1, 2], vec![0.8, 0.2]).unwrap(), &Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(), METRIC_EPS).unwrap();
    ensure!((ex - 0.8).abs() < 1e-6, "dice example gave {ex}");
    let t = within_budget(t0, 10.0, "metric oracle")?;
    Ok(format!("|ΔIoU| {:.1e}, |ΔDice| {:.1e}, hand {hand:.6}, dice example {ex:.6}, {t:.2}s", (li - oi).abs(), (ld - od).abs()))
}

pub fn spectral_oracles() -> Outcome {
    let t0 = Instant::now();
    let c = 8;
    let mut worst: f64 = 0.0;
    for f in 0..c {
        let b = dct_basis_1d(f, c).map_err(|e| e.to_string())?;
        for (i, v) in b.iter().enumerate() {
            worst = worst.max((v - (std::f64::consts::PI * f as f64 * (i as f64 + 0.5) / c as f64).cos()).abs());
        }
        for g in 0..c {
            if g != f {
                let o = dct_basis_1d(g, c).unwrap();
                worst = worst.max(b.iter().zip(&o).map(|(a, b)| a * b).sum::<f64>().abs());
            }
        }
    }
    ensure!(worst <= 1e-12, "DCT basis error {worst:e}");
    let mut rt: f64 = 0.0;
    for seed in 0..5 {
        let x = rand_tensor(&[8, 32, 32], seed, -1.0, 1.0);
        let back = irfft2(&rfft2(&x).unwrap(), 32, 32).unwrap();
        rt = rt.max(rel_err(&back, &x));
    }
    ensure!(rt <= 1e-5, "round trip relative error {rt:e}");
    let mut imp = Tensor::zeros(&[1, 8, 8]);
    imp.data_mut()[0] = 1.0;
    let s = rfft2(&imp).unwrap();
    ensure!(
        s.real.data().iter().all(|v| (v - 1.0).abs() < 1e-12) && s.imag.data().iter().all(|v| v.abs() < 1e-12),
        "impulse spectrum not flat"
    );
    let s = rfft2(&Tensor::full(&[1, 8, 8], 0.25)).unwrap();
    let ok = s.real.data().iter().enumerate().all(|(i, v)| (v - if i == 0 { 16.0 } else { 0.0 }).abs() < 1e-12);
    ensure!(ok && s.imag.data().iter().all(|v| v.abs() < 1e-12), "constant spectrum not a DC spike");
    let t = within_budget(t0, 10.0, "spectral oracles")?;
    Ok(format!("DCT err {worst:.1e}, round trip {rt:.1e}, {t:.2}s"))
}

pub fn structural_identities() -> Outcome {
    let t0 = Instant::now();
    for (d, h, w, hp, wp) in [(3, 8, 8, 2, 2), (5, 6, 9, 3, 3), (2, 4, 6, 1, 2), (4, 4, 4, 4, 4)] {
        let m = rand_tensor(&[d, h, w], (d * h * w) as u64, -1.0, 1.0);
        let back = fold_patches(&unfold_patches(&m, hp, wp).map_err(|e| e.to_string())?, h, w).map_err(|e| e.to_string())?;
        ensure!(back == m, "unfold/fold round trip differs for {d}x{h}x{w} / {hp}x{wp}");
        let g = Graph::no_grad();
        let x = g.constant(m.clone().reshape(&[1, d, h, w]).unwrap());
        let y = fold(&g, &unfold(&g, &x, hp, wp).unwrap(), 1, h, w, hp, wp).unwrap();
        ensure!(y.value().data() == m.data(), "graph unfold/fold round trip differs");
    }

    let mut model = tiny_model(27);
    for j in 1..=4 {
        for n in [format!("com.we{j}"), format!("com.wb{j}")] {
            let t = model.store.param_mut(&n).unwrap();
            t.data_mut().fill(0.0);
            t.data_mut()[0] = 1.0;
        }
    }
    let e: Vec<Tensor> = (0..4).map(|k| rand_tensor(&[1, 16, 8 >> k, 8 >> k], 30 + k as u64, -1.0, 1.0)).collect();
    let b: Vec<Tensor> = (0..4).map(|k| rand_tensor(&[1, 16, 8 >> k, 8 >> k], 40 + k as u64, -1.0, 1.0)).collect();
    let s = Session::new(&model.store, Graph::no_grad(), false);
    let ev: [Var; 4] = std::array::from_fn(|k| s.graph().constant(e[k].clone()));
    let bv: [Var; 4] = std::array::from_fn(|k| s.graph().constant(b[k].clone()));
    let (eo, bo) = com_forward(&s, &ev, &bv).map_err(|e| e.to_string())?;
    for k in 0..4 {
        ensure!(eo[k].value() == &e[k] && bo[k].value() == &b[k], "COM identity broken at level {}", k + 1);
    }

    let (mut store, cfg) = hfie_store(11, 8);
    let x = rand_tensor(&[1, 8, 4, 4], 12, -1.0, 1.0);
    let run = |store: &ParamStore| {
        let s = Session::new(store, Graph::no_grad(), false);
        let xv = s.graph().constant(x.clone());
        let full = hfie_forward(&s, "h", &xv, &cfg).unwrap().value().clone();
        let spatial = spatial_freq_enhance(&s, "h", &xv, &cfg).unwrap().value().clone();
        (full, spatial)
    };
    store.param_mut("h.w2").unwrap().data_mut()[0] = 0.0;
    let w1 = store.param("h.w1").unwrap().item();
    let (full, spatial) = run(&store);
    ensure!(full.max_abs_diff(&spatial.map(|v| w1 * v)) < 1e-15, "w2 = 0 does not reduce to the spatial path");
    store.param_mut("h.w1").unwrap().data_mut()[0] = 0.0;
    let (full, _) = run(&store);
    ensure!(full.data().iter().all(|&v| v == 0.0), "w1 = w2 = 0 does not give zero");

    let (store, cfg) = gip_store(41, 4);
    let s = Session::new(&store, Graph::no_grad(), false);
    let g = s.graph();
    let tokens = rand_tensor(&[2, 5, 8], 42, -1.0, 1.0);
    let perm = [3usize, 0, 4, 1, 2];
    let permuted = Tensor::from_fn(&[2, 5, 8], |i| {
        let (t, n, d) = (i / 40, (i / 8) % 5, i % 8);
        tokens.data()[(t * 5 + perm[n]) * 8 + d]
    });
    let a = transformer_forward(&s, "g.tr", &g.constant(tokens), &cfg).unwrap();
    let b = transformer_forward(&s, "g.tr", &g.constant(permuted), &cfg).unwrap();
    let mut worst: f64 = 0.0;
    for t in 0..2 {
        for n in 0..5 {
            for d in 0..8 {
                worst = worst.max((a.value().data()[(t * 5 + perm[n]) * 8 + d] - b.value().data()[(t * 5 + n) * 8 + d]).abs());
            }
        }
    }
    ensure!(worst < 1e-12, "permutation equivariance error {worst:e}");
    let t = within_budget(t0, 30.0, "structural identities")?;
    Ok(format!("fold exact, COM identity exact, HFIE degeneracies exact, equivariance {worst:.1e}, {t:.2}s"))
}

pub fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let h = hfie_grad();
    ensure!(h.worst() <= 1e-4, "hfie_forward gradient error {:e}", h.worst());
    parts.push(format!("hfie {:.1e}", h.worst()));
    let gp = gip_grad();
    ensure!(gp.worst() <= 1e-4, "gip_forward gradient error {:e}", gp.worst());
    parts.push(format!("gip {:.1e}", gp.worst()));
    for (name, err, tol) in loss_grads() {
        ensure!(err <= tol, "{name} gradient error {err:e} > {tol:e}");
        parts.push(format!("{name} {err:.1e}"));
    }
    let e2e = end_to_end_grad(true, 40);
    ensure!(e2e.worst() <= 1e-3, "end-to-end gradient error {:e} (input {:e}, params {:e})", e2e.worst(), e2e.input, e2e.params);
    parts.push(format!("end-to-end {:.1e}", e2e.worst()));
    let t = within_budget(t0, 300.0, "gradient suite")?;
    Ok(format!("{}, {t:.1}s", parts.join(", ")))
}

pub fn loss_closed_forms() -> Outcome {
    let g = Tensor::from_fn(&[1, 6, 6], |i| if i % 4 == 1 { 1.0 } else { 0.0 });
    let bce = bce_loss(&Tensor::full(&[1, 6, 6], 0.5), &g).unwrap();
    ensure!((bce - std::f64::consts::LN_2).abs() <= 1e-9, "BCE at 0.5 gave {bce}");
    let e = Tensor::zeros(&[1, 6, 6]);
    let d = dice_loss(&e, &e, 1e-6).unwrap();
    ensure!(d == 0.0, "empty Dice gave {d}");
    let gl = grad_loss(&g, &g, 1e-3).unwrap();
    ensure!(gl == 1e-3, "grad loss at P == G gave {gl:e}");
    let graph = Graph::no_grad();
    let zb = rand_tensor(&[2, 1, 6, 6], 1, -2.0, 2.0);
    let ze = rand_tensor(&[2, 1, 6, 6], 2, -2.0, 2.0);
    let gb = Tensor::from_fn(&[2, 1, 6, 6], |i| ((i / 3) % 2) as f64);
    let ge = Tensor::from_fn(&[2, 1, 6, 6], |i| ((i / 5) % 2) as f64);
    let pred = bgcrack::decoder::final_fuse(&graph, &graph.constant(zb), Some(&graph.constant(ze))).unwrap();
    let cfg = LossConfig::default();
    let (tot, rep) = total_loss(&graph, &pred, &gb, &ge, &cfg, true).unwrap();
    let sum: f64 = rep.components().iter().zip(cfg.alpha).map(|(c, a)| c * a).sum();
    ensure!((tot.value().item() - sum).abs() < 1e-12, "total {} vs weighted sum {sum}", tot.value().item());
    ensure!(cfg.alpha == [1.0; 5], "default weights are {:?}", cfg.alpha);
    Ok(format!("BCE {bce:.12}, Dice {d}, grad {gl:e}, total {:.9}", tot.value().item()))
}

pub fn overfit_config() -> (SynthConfig, TrainConfig) {
    let synth = SynthConfig { n_images: 10, size: 64, seed: 0, ..Default::default() };
    let cfg = TrainConfig {
        batch_size: 5,
        epochs: 100,
        max_steps: Some(200),
        augment: false,
        seed: 0,
        ..Default::default()
    };
    (synth, cfg)
}

pub fn overfit() -> Outcome {
    let t0 = Instant::now();
    let (synth, cfg) = overfit_config();
    let data = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let out = train(&cfg, &data, &[], None).map_err(|e| e.to_string())?;
    let steps = out.step_losses.len();
    ensure!(steps == 200, "ran {steps} steps");
    let (iou, dice) = evaluate_records(&out.last, &data, 8).map_err(|e| e.to_string())?;
    let t = within_budget(t0, 600.0, "overfit run")?;
    ensure!(dice >= 0.95, "train mi Dice {dice:.4} < 0.95 after {steps} steps (mi IoU {iou:.4}, {t:.0}s)");
    Ok(format!("train mi Dice {dice:.4}, mi IoU {iou:.4} after {steps} steps, {t:.0}s"))
}

pub struct AblationRun {
    pub seed: u64,
    pub full: f64,
    pub no_edge: f64,
}

pub fn ablation_runs(seeds: &[u64], epochs: usize) -> Result<Vec<AblationRun>, String> {
    let base = SynthConfig { size: 64, ..Default::default() };
    let train_set = generate_synthetic(&SynthConfig { n_images: 200, seed: 1, ..base.clone() }).map_err(|e| e.to_string())?;
    let val_set = generate_synthetic(&SynthConfig { n_images: 25, seed: 2, ..base.clone() }).map_err(|e| e.to_string())?;
    let test_set = generate_synthetic(&SynthConfig { n_images: 50, seed: 3, ..base }).map_err(|e| e.to_string())?;
    let score = |no_edge: bool, seed: u64| -> Result<f64, String> {
        let cfg = TrainConfig {
            epochs,
            seed,
            model: ModelConfig { ablation: Ablation { no_edge, ..Default::default() }, ..Default::default() },
            ..Default::default()
        };
        let out = train(&cfg, &train_set, &val_set, None).map_err(|e| e.to_string())?;
        Ok(evaluate_records(&out.best, &test_set, 8).map_err(|e| e.to_string())?.0)
    };
    seeds
        .iter()
        .map(|&seed| Ok(AblationRun { seed, full: score(false, seed)?, no_edge: score(true, seed)? }))
        .collect()
}

pub fn ablation_direction() -> Outcome {
    let t0 = Instant::now();
    let runs = ablation_runs(&[0, 1, 2], 15)?;
    let n = runs.len() as f64;
    let full = runs.iter().map(|r| r.full).sum::<f64>() / n;
    let no_edge = runs.iter().map(|r| r.no_edge).sum::<f64>() / n;
    let per_seed: Vec<String> = runs.iter().map(|r| format!("seed {} {:.4}/{:.4}", r.seed, r.full, r.no_edge)).collect();
    let t = within_budget(t0, 3600.0, "ablation benchmark")?;
    let detail = format!("full {full:.4} vs no-edge {no_edge:.4} test mi IoU ({}), {t:.0}s", per_seed.join(", "));
    ensure!(full >= no_edge, "{detail}");
    Ok(detail)
}

pub fn efficiency() -> Outcome {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Init { store: &mut store, rng: &mut rng }.conv("c", 3, 8, 3, 1, true);
    ensure!(count_params(&store) == 3 * 8 * 9 + 8, "conv params {}", count_params(&store));
    let g = Graph::dry_run();
    g.conv2d(&g.constant(Tensor::zeros(&[1, 3, 64, 64])), &g.constant(Tensor::zeros(&[8, 3, 3, 3])), None, 1, 1, 1)
        .unwrap();
    ensure!(g.macs() == 884_736, "3x3 conv 3->8 at 64² gave {} MACs", g.macs());
    let g = Graph::dry_run();
    g.conv2d(&g.constant(Tensor::zeros(&[1, 16, 32, 32])), &g.constant(Tensor::zeros(&[16, 1, 7, 7])), None, 1, 3, 16)
        .unwrap();
    ensure!(g.macs() == 16 * 49 * 32 * 32, "depth-wise 7x7 gave {} MACs", g.macs());
    let model = BgCrack::new(ModelConfig::default(), 0).unwrap();
    let params = count_params(&model.store);
    ensure!(params <= 5_000_000, "default model has {params} parameters");
    let macs = count_macs(&model, 512, 512).map_err(|e| e.to_string())?;
    ensure!(macs > 0, "no MACs counted");
    Ok(format!("single-layer counts exact, default model {params} params, {:.2} GMACs at 512²", macs as f64 / 1e9))
}

pub fn data_pipeline() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let synth = SynthConfig { n_images: 6, size: 64, seed: 5, ..Default::default() };
    let records = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    dump_split(&records, dir.path(), "train").map_err(|e| e.to_string())?;
    let loaded = load_dataset(&DatasetManifest::new(dir.path(), "train"), synth.edge_width).map_err(|e| e.to_string())?;
    ensure!(loaded == records, "dataset round trip is lossy");

    let mut dot = Tensor::zeros(&[1, 16, 16]);
    dot.data_mut()[5 * 16 + 5] = 1.0;
    let e = derive_edge_label(&dot, 1).unwrap();
    let want = Tensor::from_fn(&[1, 16, 16], |i| if (i / 16).abs_diff(5) <= 1 && (i % 16).abs_diff(5) <= 1 { 1.0 } else { 0.0 });
    ensure!(e == want, "single-pixel edge label is not the 3x3 block");
    let square = Tensor::from_fn(&[1, 16, 16], |i| if (4..10).contains(&(i / 16)) && (4..10).contains(&(i % 16)) { 1.0 } else { 0.0 });
    let e = derive_edge_label(&square, 1).unwrap();
    let ring = Tensor::from_fn(&[1, 16, 16], |i| {
        let (y, x) = (i / 16, i % 16);
        let outer = (3..11).contains(&y) && (3..11).contains(&x);
        let inner = (5..9).contains(&y) && (5..9).contains(&x);
        if outer && !inner { 1.0 } else { 0.0 }
    });
    ensure!(e == ring, "solid-square edge label is not the 2-pixel ring");

    for (k, r) in records.iter().enumerate() {
        for seed in 0..12 {
            let a = augment(r, seed * 31 + k as u64);
            ensure!(a.g_b.sum() == r.g_b.sum() && a.g_e.sum() == r.g_e.sum(), "augmentation changed a mask count");
        }
    }
    let again = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let bitwise = records.iter().zip(&again).all(|(a, b)| {
        a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()) && a.g_b == b.g_b
    });
    ensure!(bitwise, "synthetic generation is not deterministic");
    Ok(format!("{} records round-trip exactly, morphology and augmentation checks hold", records.len()))
}

pub fn reproducibility() -> Outcome {
    let synth = SynthConfig { n_images: 12, size: 64, seed: 9, ..Default::default() };
    let train_set = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let val_set = generate_synthetic(&SynthConfig { n_images: 4, seed: 10, ..synth }).map_err(|e| e.to_string())?;
    let cfg = TrainConfig { batch_size: 2, epochs: 2, seed: 3, ..Default::default() };
    let run = || -> Result<(f64, f64, f64), String> {
        let out = train(&cfg, &train_set, &val_set, None).map_err(|e| e.to_string())?;
        let h = &out.history[0];
        Ok((h.val_mi_iou, h.val_mi_dice, out.step_losses[10].total))
    };
    let (a, b) = (run()?, run()?);
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-300);
    let worst = rel(a.0, b.0).max(rel(a.1, b.1)).max(rel(a.2, b.2));
    ensure!(worst <= 1e-6, "runs differ: {a:?} vs {b:?}");
    Ok(format!("epoch-0 val mi IoU {:.6}, mi Dice {:.6}, step-10 loss {:.6}; max relative difference {worst:e}", a.0, a.1, a.2))
}

pub fn synthetic_records(n: usize, seed: u64) -> Vec<SampleRecord> {
    generate_synthetic(&SynthConfig { n_images: n, size: 64, seed, ..Default::default() }).unwrap()
}
