//! Adam training loop, validation-based checkpoint selection and the
//! append-only JSON-lines run log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{augment, collate, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::metrics::{image_dice, image_iou, METRIC_EPS};
use crate::model::{BgCrack, ModelConfig};
use crate::nn::{ParamStore, Session, BN_MOMENTUM};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Random flip/rotation of every training sample.
    pub augment: bool,
    /// Stop after this many optimiser steps, if set.
    pub max_steps: Option<usize>,
    pub edge_width: usize,
    pub eval_batch: usize,
    pub train_manifest: Option<DatasetManifest>,
    pub val_manifest: Option<DatasetManifest>,
    pub test_manifest: Option<DatasetManifest>,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6e-3,
            batch_size: 9,
            epochs: 70,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            augment: true,
            max_steps: None,
            edge_width: 1,
            eval_batch: 8,
            train_manifest: None,
            val_manifest: None,
            test_manifest: None,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("lr, batch_size and eval_batch must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("Adam betas must lie in [0,1), got {:?}", self.adam_betas)));
        }
        self.model.validate()
    }
}

/// Adam with bias correction and optional L2 weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in store.params_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.numel()]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gv = gv + self.weight_decay * *pv;
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mh = *mv / c1;
                let vh = *vv / c2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Config { config: TrainConfig, n_train: usize, n_val: usize },
    Step { epoch: usize, step: usize, loss: LossReport },
    Epoch { epoch: usize, mean_loss: f64, val_mi_iou: f64, val_mi_dice: f64, wall_secs: f64 },
    Done { best_epoch: Option<usize>, best_val_mi_iou: Option<f64>, steps: usize, wall_secs: f64 },
}

/// Append-only JSON-lines log.
pub struct RunLog {
    path: PathBuf,
    file: File,
}

impl RunLog {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, e: &LogEvent) -> Result<()> {
        writeln!(self.file, "{}", serde_json::to_string(e)?)?;
        self.file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Vec<LogEvent>> {
        let mut out = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_mi_iou: f64,
    pub val_mi_dice: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights of the epoch with the best validation mi IoU (initial weights
    /// when no epoch ran).
    pub best: BgCrack,
    pub last: BgCrack,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<LossReport>,
}

/// Body probability maps `[1, H, W]` for every record, in eval mode.
pub fn predict_records(model: &BgCrack, records: &[SampleRecord], batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch.max(1)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let (img, _, _) = collate(&refs)?;
        let s = Session::new(&model.store, Graph::no_grad(), false);
        let pred = model.forward(&s, &s.graph().constant(img))?;
        for i in 0..chunk.len() {
            out.push(pred.p_b.value().batch_item(i)?);
        }
    }
    Ok(out)
}

/// `(mi IoU, mi Dice)` of body predictions over `records`.
pub fn evaluate_records(model: &BgCrack, records: &[SampleRecord], batch: usize) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty split".into()));
    }
    let preds = predict_records(model, records, batch)?;
    let (mut iou, mut dice) = (0.0, 0.0);
    for (p, r) in preds.iter().zip(records) {
        let p = p.clone().reshape(r.g_b.shape())?;
        iou += image_iou(&p, &r.g_b, METRIC_EPS)?;
        dice += image_dice(&p, &r.g_b, METRIC_EPS)?;
    }
    let n = records.len() as f64;
    Ok((iou / n, dice / n))
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
        ^ 0x5851_F42D_4C95_7F2D
}

/// One optimiser step on a batch; returns the loss breakdown.
pub fn train_step(model: &mut BgCrack, opt: &mut Adam, batch: &[&SampleRecord], loss: &LossConfig, step: usize) -> Result<LossReport> {
    let (img, gb, ge) = collate(batch)?;
    let (report, grads, bn) = {
        let s = Session::new(&model.store, Graph::new(), true);
        let pred = model.forward(&s, &s.graph().constant(img))?;
        let use_grad = !model.config.ablation.no_grad_loss;
        let (total, report) = total_loss(s.graph(), &pred, &gb, &ge, loss, use_grad)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("{report:?}"),
            });
        }
        let g = s.graph().backward(&total)?;
        let grads = s.param_grads(&g);
        if let Some((name, _)) = grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFinite {
                step,
                detail: format!("gradient of {name}"),
            });
        }
        (report, grads, s.take_bn_updates())
    };
    opt.step(&mut model.store, &grads);
    model.store.apply_bn_updates(&bn, BN_MOMENTUM);
    Ok(report)
}

/// Train on `train`, select the best epoch on `val` (or on `train` when
/// `val` is empty).
pub fn train(cfg: &TrainConfig, train: &[SampleRecord], val: &[SampleRecord], mut log: Option<&mut RunLog>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() && cfg.epochs > 0 {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let val = if val.is_empty() { train } else { val };
    let started = Instant::now();
    let mut model = BgCrack::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.lr, cfg.adam_betas, cfg.adam_eps, cfg.weight_decay);
    if let Some(l) = log.as_deref_mut() {
        l.append(&LogEvent::Config {
            config: cfg.clone(),
            n_train: train.len(),
            n_val: val.len(),
        })?;
    }
    let mut best = model.clone();
    let mut best_epoch = None;
    let mut best_iou = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 1)));
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let samples: Vec<SampleRecord> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train[i], mix(cfg.seed, epoch as u64, 2 + i as u64))
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&SampleRecord> = samples.iter().collect();
            let rep = train_step(&mut model, &mut opt, &refs, &cfg.loss, step)?;
            log::debug!("epoch {epoch} step {step} loss {:.6}", rep.total);
            if let Some(l) = log.as_deref_mut() {
                l.append(&LogEvent::Step { epoch, step, loss: rep })?;
            }
            loss_sum += rep.total;
            n_batches += 1;
            step_losses.push(rep);
            step += 1;
        }
        let (iou, dice) = evaluate_records(&model, val, cfg.eval_batch)?;
        let rec = EpochRecord {
            epoch,
            mean_loss: if n_batches > 0 { loss_sum / n_batches as f64 } else { f64::NAN },
            val_mi_iou: iou,
            val_mi_dice: dice,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.4} val mi IoU {:.4} mi Dice {:.4}", rec.mean_loss, iou, dice);
        if let Some(l) = log.as_deref_mut() {
            l.append(&LogEvent::Epoch {
                epoch,
                mean_loss: rec.mean_loss,
                val_mi_iou: iou,
                val_mi_dice: dice,
                wall_secs: rec.wall_secs,
            })?;
        }
        history.push(rec);
        if iou > best_iou {
            best_iou = iou;
            best_epoch = Some(epoch);
            best = model.clone();
        }
        if cfg.max_steps.is_some_and(|m| step >= m) {
            break 'epochs;
        }
    }
    if let Some(l) = log.as_deref_mut() {
        l.append(&LogEvent::Done {
            best_epoch,
            best_val_mi_iou: best_epoch.map(|_| best_iou),
            steps: step,
            wall_secs: started.elapsed().as_secs_f64(),
        })?;
    }
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        history,
        step_losses,
    })
}
