//! SGD training with momentum and cosine decay, per-epoch validation and
//! checkpointing.
//!
//! Each image gets its own tape. Images of a batch run in parallel, but the
//! loss normalizers are batch-wide and per-image gradients are summed in
//! image order, so results do not depend on the thread count.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::anchors::{assign_targets, AnchorSet, Assignment, Label, IGNORE_IOU};
use crate::attention::HeadOutput;
use crate::checkpoint::Checkpoint;
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::eval::{evaluate, ApMode, ImageResult, MetricsReport};
use crate::losses::{class_weights, head_loss, objectness_targets, LossBreakdown, LossConfig};
use crate::model::{branch_seeds, Model, ModelConfig, ModelVars};
use crate::postprocess::{postprocess, DEFAULT_NMS_IOU};
use crate::synth::{load_split, Filter, Image, Split};
use crate::tape::Tape;
use crate::tensor::{precision, with_precision};

/// Detection settings used for validation mAP.
pub const VAL_CONFIDENCE: f64 = 0.001;
pub const VAL_MAX_DETECTIONS: usize = 300;
/// Final learning rate as a fraction of the initial one.
pub const LR_FLOOR_FRACTION: f64 = 0.01;
/// RNG stream for shuffling and augmentation; stream 0 initializes weights.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Random horizontal mirroring of training images.
    pub augment: bool,
    pub threads: usize,
    /// Joint gradient L2 norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub gamma: f64,
    pub use_focal_cls: bool,
    pub objectness_iou: bool,
    pub model: ModelConfig,
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let loss = LossConfig::new(1);
        Self {
            epochs: 30,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            seed: 42,
            augment: true,
            threads: 1,
            grad_clip: 10.0,
            lambda_coord: loss.lambda_coord,
            lambda_noobj: loss.lambda_noobj,
            gamma: loss.gamma,
            use_focal_cls: loss.use_focal_cls,
            objectness_iou: loss.objectness_iou,
            model: ModelConfig::default(),
            data: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            log: PathBuf::from("train_log.csv"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return Err(Error::Config(
                "epochs, batch_size and threads must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!(
                "grad_clip must be >= 0, got {}",
                self.grad_clip
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0,1), got {}",
                self.momentum
            )));
        }
        self.loss_config(vec![1.0; self.model.n_categories])
            .validate()?;
        self.model.validate()
    }

    pub fn loss_config(&self, alpha: Vec<f64>) -> LossConfig {
        LossConfig {
            lambda_coord: self.lambda_coord,
            lambda_noobj: self.lambda_noobj,
            gamma: self.gamma,
            alpha,
            use_focal_cls: self.use_focal_cls,
            objectness_iou: self.objectness_iou,
        }
    }

    /// Hyperparameters as `(key, value)` pairs; paths and the thread count are
    /// left out so runs in different directories produce identical echoes.
    pub fn echo(&self) -> Vec<(String, String)> {
        [
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("seed", self.seed.to_string()),
            ("augment", self.augment.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("loss.lambda_coord", self.lambda_coord.to_string()),
            ("loss.lambda_noobj", self.lambda_noobj.to_string()),
            ("loss.gamma", self.gamma.to_string()),
            ("loss.focal", self.use_focal_cls.to_string()),
            ("loss.objectness_iou", self.objectness_iou.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.echo() {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "data = {}", self.data.display());
        let _ = writeln!(s, "checkpoint = {}", self.checkpoint.display());
        let _ = writeln!(s, "log = {}", self.log.display());
        s.push_str(&self.model.to_kv("model."));
        s
    }

    /// Relative paths resolve against `base`.
    pub fn from_kv(kv: &mut KeyValues, base: &Path) -> Result<Self> {
        let d = TrainConfig::default();
        let path = |kv: &mut KeyValues, key: &str, default: PathBuf| -> Result<PathBuf> {
            let p: PathBuf = kv
                .take::<String>(key)?
                .map(PathBuf::from)
                .unwrap_or(default);
            Ok(if p.is_absolute() { p } else { base.join(p) })
        };
        let cfg = TrainConfig {
            epochs: kv.take_or("epochs", d.epochs)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            lr: kv.take_or("lr", d.lr)?,
            momentum: kv.take_or("momentum", d.momentum)?,
            seed: kv.take_or("seed", d.seed)?,
            augment: kv.take_or("augment", d.augment)?,
            threads: kv.take_or("threads", d.threads)?,
            grad_clip: kv.take_or("grad_clip", d.grad_clip)?,
            lambda_coord: kv.take_or("loss.lambda_coord", d.lambda_coord)?,
            lambda_noobj: kv.take_or("loss.lambda_noobj", d.lambda_noobj)?,
            gamma: kv.take_or("loss.gamma", d.gamma)?,
            use_focal_cls: kv.take_or("loss.focal", d.use_focal_cls)?,
            objectness_iou: kv.take_or("loss.objectness_iou", d.objectness_iou)?,
            data: path(kv, "data", d.data)?,
            checkpoint: path(kv, "checkpoint", d.checkpoint)?,
            log: path(kv, "log", d.log)?,
            model: ModelConfig::from_kv(kv, "model.")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::from_kv(&mut kv, base)?;
        kv.finish()?;
        Ok(cfg)
    }
}

/// Cosine decay from `lr` at step 0 to `lr · LR_FLOOR_FRACTION` at the last step.
pub fn cosine_lr(lr: f64, step: usize, total_steps: usize) -> f64 {
    let floor = lr * LR_FLOOR_FRACTION;
    if total_steps <= 1 {
        return lr;
    }
    let t = step as f64 / (total_steps - 1) as f64;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `α_t = Σ w / w_t` with `w_t` the training count of category `t` plus one.
pub fn focal_alpha(labels: &[Vec<Label>], n_categories: usize) -> Result<Vec<f64>> {
    let mut counts = vec![1.0; n_categories];
    for l in labels.iter().flatten() {
        if l.category >= n_categories {
            return Err(Error::Validation(format!(
                "label category {} out of range for {n_categories} categories",
                l.category
            )));
        }
        counts[l.category] += 1.0;
    }
    class_weights(&counts)
}

/// Resizes to the model input when needed.
pub fn prepare_image(img: &Image, config: &ModelConfig) -> Result<Image> {
    img.resize(config.input_h, config.input_w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub val_map50: f64,
}

pub const LOG_HEADER: &str = "epoch,cls,coord,noobj,obj,total,val_mAP50";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, l.cls, l.coord, l.noobj, l.obj, l.total, self.val_map50
        )
    }
}

struct ImageStep {
    tape: Tape,
    vars: ModelVars,
    out: HeadOutput,
    assignment: Assignment,
    obj_targets: Vec<f64>,
}

fn forward_image(
    model: &Model,
    anchors: &AnchorSet,
    img: &Image,
    labels: &[Label],
) -> Result<ImageStep> {
    let mut tape = Tape::new();
    let x = tape.constant(img.to_tensor());
    let vars = model.forward_t(&mut tape, x)?;
    let out = model.head_output(&tape, &vars)?;
    let assignment = assign_targets(labels, anchors, IGNORE_IOU);
    let obj_targets = objectness_targets(&out, &assignment, anchors);
    Ok(ImageStep {
        tape,
        vars,
        out,
        assignment,
        obj_targets,
    })
}

/// Loss and summed parameter gradients (in [`Model::tensors`] order) for one batch.
pub fn batch_gradients(
    model: &Model,
    anchors: &AnchorSet,
    batch: &[(Image, Vec<Label>)],
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mode = precision();
    let steps: Vec<ImageStep> = batch
        .par_iter()
        .map(|(img, labels)| with_precision(mode, || forward_image(model, anchors, img, labels)))
        .collect::<Result<_>>()?;
    let outputs: Vec<&HeadOutput> = steps.iter().map(|s| &s.out).collect();
    let assignments: Vec<&Assignment> = steps.iter().map(|s| &s.assignment).collect();
    let targets: Vec<Vec<f64>> = steps.iter().map(|s| s.obj_targets.clone()).collect();
    let (loss, head_grads) = head_loss(&outputs, &assignments, &targets, loss_cfg)?;
    let n_cat = model.config.n_categories;
    let per_image: Vec<Vec<Option<Vec<f64>>>> = steps
        .into_par_iter()
        .zip(head_grads)
        .map(|(s, g)| {
            with_precision(mode, || {
                let seeds = branch_seeds(&s.tape, &s.vars, &g, n_cat);
                let mut grads = s.tape.backward(&seeds)?;
                Ok(s.vars.params.iter().map(|&p| grads.take(p)).collect())
            })
        })
        .collect::<Result<_>>()?;
    let mut total: Vec<Vec<f64>> = model
        .tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    for image in per_image {
        for (acc, g) in total.iter_mut().zip(image) {
            if let Some(g) = g {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok((loss, total))
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// SGD with momentum: `v ← μ v + g`, `p ← p − lr v`, then parameters are
/// rounded to `f32`.
pub fn sgd_step(
    model: &mut Model,
    velocity: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    lr: f64,
    momentum: f64,
) {
    for ((p, v), g) in model.tensors_mut().into_iter().zip(velocity).zip(grads) {
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    model.round_to_f32();
}

/// Detections for each image at the given thresholds.
pub fn predict(
    model: &Model,
    images: &[Image],
    confidence: f64,
    iou: f64,
    max_dets: usize,
) -> Result<Vec<Vec<crate::postprocess::Detection>>> {
    let anchors = model.config.anchors()?;
    let mode = precision();
    images
        .par_iter()
        .map(|img| {
            with_precision(mode, || {
                let x = prepare_image(img, &model.config)?.to_tensor();
                let (out, _) = model.infer(&x)?;
                Ok(postprocess(&out, &anchors, confidence, iou, max_dets))
            })
        })
        .collect()
}

/// Metrics over a labelled set with validation-style detection settings.
pub fn evaluate_model(
    model: &Model,
    samples: &[(Image, Vec<Label>)],
    mode: ApMode,
) -> Result<MetricsReport> {
    let images: Vec<Image> = samples.iter().map(|(i, _)| i.clone()).collect();
    let dets = predict(
        model,
        &images,
        VAL_CONFIDENCE,
        DEFAULT_NMS_IOU,
        VAL_MAX_DETECTIONS,
    )?;
    let results: Vec<ImageResult> = dets
        .into_iter()
        .zip(samples)
        .map(|(detections, (_, labels))| ImageResult {
            detections,
            labels: labels.clone(),
        })
        .collect();
    Ok(evaluate(&results, model.config.n_categories, mode))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochStats>,
}

/// Trains on `data/{train,val}` and writes the checkpoint and log after
/// every epoch. On a non-finite loss or gradient the run stops with
/// [`Error::NonFinite`] and the checkpoint of the last finished epoch stays
/// on disk.
pub fn train(
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats) + Send,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n_cat = cfg.model.n_categories;
    let load = |split| -> Result<Vec<(Image, Vec<Label>)>> {
        load_split(&cfg.data, split, n_cat)?
            .into_iter()
            .map(|(img, l)| Ok((prepare_image(&img, &cfg.model)?, l)))
            .collect()
    };
    let train_set = load(Split::Train)?;
    let val_set = load(Split::Val)?;
    if train_set.is_empty() {
        return Err(Error::Validation(format!(
            "no training images under {}",
            cfg.data.display()
        )));
    }
    let labels: Vec<Vec<Label>> = train_set.iter().map(|(_, l)| l.clone()).collect();
    let loss_cfg = cfg.loss_config(focal_alpha(&labels, n_cat)?);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run(cfg, &train_set, &val_set, &loss_cfg, &mut on_epoch))
}

fn run(
    cfg: &TrainConfig,
    train_set: &[(Image, Vec<Label>)],
    val_set: &[(Image, Vec<Label>)],
    loss_cfg: &LossConfig,
    on_epoch: &mut (dyn FnMut(&EpochStats) + Send),
) -> Result<TrainOutcome> {
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(&mut init_rng, cfg.model.clone())?;
    let anchors = cfg.model.anchors()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let checkpoint = |model: &Model, epoch: usize, rng: &ChaCha8Rng| Checkpoint {
        model: model.clone(),
        epoch,
        rng_seed: cfg.seed,
        rng_stream: rng.get_stream(),
        rng_word_pos: rng.get_word_pos(),
        train_echo: cfg.echo(),
    };
    checkpoint(&model, 0, &rng).save(&cfg.checkpoint)?;
    let mut log = std::fs::File::create(&cfg.log).map_err(|e| Error::io(&cfg.log, e))?;
    writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&cfg.log, e))?;

    let mut velocity: Vec<Vec<f64>> = model
        .tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.len()])
        .collect();
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<(Image, Vec<Label>)> = idx
                .iter()
                .map(|&i| {
                    let (img, labels) = &train_set[i];
                    if cfg.augment && rng.gen_bool(0.5) {
                        Filter::Mirror.apply(img, labels)
                    } else {
                        Ok((img.clone(), labels.clone()))
                    }
                })
                .collect::<Result<_>>()?;
            let (loss, mut grads) = batch_gradients(&model, &anchors, &batch, loss_cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite {
                    op: "total_loss".into(),
                });
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            sgd_step(
                &mut model,
                &mut velocity,
                &grads,
                cosine_lr(cfg.lr, step, total_steps),
                cfg.momentum,
            );
            step += 1;
            sum.cls += loss.cls;
            sum.coord += loss.coord;
            sum.noobj += loss.noobj;
            sum.obj += loss.obj;
            sum.total += loss.total;
        }
        let n = batches_per_epoch as f64;
        let loss = LossBreakdown {
            cls: sum.cls / n,
            coord: sum.coord / n,
            noobj: sum.noobj / n,
            obj: sum.obj / n,
            total: sum.total / n,
        };
        let val_map50 = if val_set.is_empty() {
            0.0
        } else {
            evaluate_model(&model, val_set, ApMode::Interp)?.map50
        };
        let stats = EpochStats {
            epoch,
            loss,
            val_map50,
        };
        writeln!(log, "{}", stats.csv_row()).map_err(|e| Error::io(&cfg.log, e))?;
        log.flush().map_err(|e| Error::io(&cfg.log, e))?;
        checkpoint(&model, epoch, &rng).save(&cfg.checkpoint)?;
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainOutcome {
        model,
        epochs: history,
    })
}
