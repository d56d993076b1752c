use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use bgcrack::checkpoint;
use bgcrack::data::{
    dump_split, generate_synthetic, load_dataset, read_image, DatasetManifest, SynthConfig,
};
use bgcrack::infer::{gradcam, predict_image, render_heatmap, write_prediction, CamTarget};
use bgcrack::metrics::{count_macs, profile, MetricsReport};
use bgcrack::train::{evaluate_records, train, RunLog, TrainConfig};
use bgcrack::{Error, Result};

#[derive(Parser)]
#[command(name = "bgcrack", version, about = "Boundary-guided crack segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the best checkpoint plus a JSON-lines run log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Write mask, edge and overlay PNGs for each image.
    Predict(PredictArgs),
    /// Render a Grad-CAM heatmap for one image.
    Gradcam(GradcamArgs),
    /// Report parameter and MAC counts.
    Profile(ProfileArgs),
    /// Generate a synthetic crack dataset in the on-disk layout.
    Synth(SynthArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON training/model configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    no_edge: bool,
    #[arg(long)]
    no_hfie: bool,
    #[arg(long)]
    no_gip: bool,
    #[arg(long)]
    no_grad_loss: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg: TrainConfig = match &self.config {
            Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
            None => TrainConfig::default(),
        };
        let ab = &mut cfg.model.ablation;
        ab.no_edge |= self.no_edge;
        ab.no_hfie |= self.no_hfie;
        ab.no_gip |= self.no_gip;
        ab.no_grad_loss |= self.no_grad_loss;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset root containing `<split>/images` and `<split>/masks`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    train_split: String,
    /// Validation split; skipped when its directory is absent.
    #[arg(long, default_value = "val")]
    val_split: String,
    /// Output directory for `best.safetensors`, `last.safetensors` and `run.jsonl`.
    #[arg(long, default_value = "runs/bgcrack")]
    out: PathBuf,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// JSON dataset manifest; overrides `--data`/`--split`.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    eval_batch: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value = "body")]
    target: CamTarget,
    /// Activation to explain; defaults to the first fusion level of the target stream.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Profile the configuration stored in this checkpoint instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn emit<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    if let Some(root) = &a.data {
        cfg.train_manifest = Some(DatasetManifest::new(root, &a.train_split));
        let val = DatasetManifest::new(root, &a.val_split);
        cfg.val_manifest = val.split_dir().is_dir().then_some(val);
    }
    let tm = cfg
        .train_manifest
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no training data: pass --data or set train_manifest".into()))?;
    let train_set = load_dataset(&tm, cfg.edge_width)?;
    let val_set = match &cfg.val_manifest {
        Some(m) => load_dataset(m, cfg.edge_width)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&a.out)?;
    let mut log = RunLog::create(&a.out.join("run.jsonl"))?;
    let outcome = train(&cfg, &train_set, &val_set, Some(&mut log))?;
    let best_path = a.out.join("best.safetensors");
    checkpoint::save(&outcome.best, &best_path)?;
    checkpoint::save(&outcome.last, &a.out.join("last.safetensors"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        checkpoint: &'a Path,
        run_log: &'a Path,
        best_epoch: Option<usize>,
        epochs: usize,
        steps: usize,
        params: usize,
    }
    emit(&Summary {
        checkpoint: &best_path,
        run_log: log.path(),
        best_epoch: outcome.best_epoch,
        epochs: outcome.history.len(),
        steps: outcome.step_losses.len(),
        params: outcome.best.num_params(),
    })
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let manifest = match (&a.manifest, &a.data) {
        (Some(p), _) => DatasetManifest::from_json_file(p)?,
        (None, Some(root)) => DatasetManifest::new(root, &a.split),
        (None, None) => return Err(Error::InvalidArgument("pass --data or --manifest".into())),
    };
    let records = load_dataset(&manifest, 1)?;
    let first = records
        .first()
        .ok_or_else(|| Error::Dataset(format!("split {:?} is empty", manifest.split)))?;
    let (h, w) = (first.height(), first.width());
    let (mi_iou, mi_dice) = evaluate_records(&model, &records, a.eval_batch)?;
    emit(&MetricsReport {
        mi_iou,
        mi_dice,
        n_images: records.len(),
        params: model.num_params(),
        macs: count_macs(&model, h.div_ceil(32) * 32, w.div_ceil(32) * 32)?,
    })
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

fn run_predict(a: PredictArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    for path in &a.images {
        let img = read_image(path)?;
        let pred = predict_image(&model, &img)?;
        let files = write_prediction(&a.out, &file_stem(path), &img, &pred)?;
        emit(&files)?;
    }
    Ok(())
}

fn run_gradcam(a: GradcamArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let img = read_image(&a.image)?;
    let layer = a.layer.unwrap_or_else(|| {
        match a.target {
            CamTarget::Edge => "ffm_edge.l1",
            CamTarget::Body => "ffm_body.l1",
        }
        .to_string()
    });
    let heat = gradcam(&model, &img, a.target, &layer)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    render_heatmap(&img, &heat)?.save(&a.out)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        heatmap: &'a Path,
        layer: &'a str,
        min: f64,
        max: f64,
    }
    emit(&Summary { heatmap: &a.out, layer: &layer, min: heat.min(), max: heat.max() })
}

fn run_profile(a: ProfileArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => {
            let cfg = a.config.resolve()?;
            bgcrack::BgCrack::new(cfg.model, cfg.seed)?
        }
    };
    emit(&profile(&model, a.height, a.width)?)
}

fn run_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig { n_images: a.n, size: a.size, seed: a.seed, ..Default::default() };
    let records = generate_synthetic(&cfg)?;
    dump_split(&records, &a.out, &a.split)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        root: &'a Path,
        split: &'a str,
        n_images: usize,
    }
    emit(&Summary { root: &a.out, split: &a.split, n_images: records.len() })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Predict(a) => run_predict(a),
        Command::Gradcam(a) => run_gradcam(a),
        Command::Profile(a) => run_profile(a),
        Command::Synth(a) => run_synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
