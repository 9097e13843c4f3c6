//! The training loop shared by the three stages.

use gdetr_autograd::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use super::checkpoint::{load_checkpoint, load_params, Checkpoint, LoadReport};
use super::config::{RunConfig, StageConfig, StageId};
use super::ema::{ema_update, EmaState};
use super::metrics::MetricsLog;
use super::optim::{build_optimizer_groups, clip_grad_norm, AdamW, Schedule};
use crate::assignment::{compute_matches, total_loss, CostWeights, LossInputs, Target};
use crate::backbone::{ImageTensor, ViTConfig, Vit};
use crate::data::{holdout_split, Sample, Split};
use crate::error::{invalid_arg, Error, Result};
use crate::eval::EvalResult;
use crate::geometry::{to_normalized, BoxA};
use crate::inference::{evaluate_model, InferenceMode};
use crate::model::{Detector, ModelConfig, BACKBONE};
use crate::nn::{Binding, Linear, ParamStore};

/// Name prefix of the pretext head used in encoder pretraining.
pub const PRETEXT: &str = "pretext";

/// Training samples plus the validation split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Option<Split>,
}

impl TrainData {
    /// Combines splits, moving validation images past `holdout` into training.
    pub fn new(train: &Split, val: Option<Split>, holdout: Option<usize>) -> Result<Self> {
        let mut samples = train.samples();
        let val = match (val, holdout) {
            (Some(v), Some(k)) => {
                let (keep, extra) = holdout_split(&v, k)?;
                samples.extend(extra.samples());
                Some(keep)
            }
            (v, None) => v,
            (None, Some(_)) => return Err(invalid_arg!("a holdout needs a validation split")),
        };
        Ok(Self { train: samples, val })
    }

    /// Loads the train and validation directories named by `cfg`.
    pub fn load(cfg: &StageConfig) -> Result<Self> {
        let train = Split::load(&cfg.train)?;
        let val = Split::load(&cfg.val)?;
        Self::new(&train, Some(val), cfg.holdout)
    }
}

/// ViT with a linear per-patch classifier over `classes + 1` outputs.
#[derive(Clone, Debug)]
pub struct PretextModel {
    pub vit: Vit,
    head: Linear,
    pub num_classes: usize,
}

impl PretextModel {
    pub fn new(store: &mut ParamStore, vit: ViTConfig, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let dim = vit.embed_dim;
        let vit = Vit::new(store, BACKBONE, vit, rng)?;
        let head = Linear::new(store, &format!("{PRETEXT}.head"), dim, num_classes + 1, rng);
        Ok(Self { vit, head, num_classes })
    }

    /// `[patches, classes + 1]` logits.
    pub fn logits<'t>(&self, p: &Binding<'t>, img: &ImageTensor) -> Result<(Var<'t>, (usize, usize))> {
        let enc = self.vit.encode(p, img)?;
        Ok((self.head.forward(p, enc.features), enc.grid))
    }
}

/// Per-patch class: the label of the box containing the patch center, or
/// `background` when no box does.
pub fn patch_labels(boxes: &[BoxA], labels: &[usize], grid: (usize, usize), patch: usize, background: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(grid.0 * grid.1);
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let (x, y) = ((c as f64 + 0.5) * patch as f64, (r as f64 + 0.5) * patch as f64);
            let hit = boxes.iter().position(|b| x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2);
            out.push(hit.map_or(background, |i| labels[i]));
        }
    }
    out
}

/// A resized, optionally mirrored training image and its boxes in pixels
/// of the resized frame.
#[derive(Clone, Debug)]
pub struct Augmented {
    pub tensor: ImageTensor,
    pub boxes: Vec<BoxA>,
    pub labels: Vec<usize>,
}

impl Augmented {
    pub fn new(sample: &Sample, vit: &ViTConfig, size: usize, flip: bool) -> Self {
        let mut img = sample.image.resize_longer_side(size);
        let sx = img.width() as f64 / sample.image.width() as f64;
        let sy = img.height() as f64 / sample.image.height() as f64;
        let w = img.width() as f64;
        if flip {
            img = img.hflip();
        }
        let boxes = sample
            .boxes
            .iter()
            .map(|b| {
                let s = b.scale(sx, sy);
                if flip {
                    crate::geometry::hflip(s, w)
                } else {
                    s
                }
            })
            .collect();
        Self {
            tensor: ImageTensor::from_image(&img, vit),
            boxes,
            labels: sample.labels.clone(),
        }
    }

    /// Boxes normalized by the unpadded image extent; degenerate boxes are dropped.
    pub fn target(&self) -> Result<Target> {
        let (w, h) = (self.tensor.valid_width as f64, self.tensor.valid_height as f64);
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for (b, &l) in self.boxes.iter().zip(&self.labels) {
            if let Ok(n) = to_normalized(b.clip(w, h), w, h) {
                boxes.push(n);
                labels.push(l);
            }
        }
        Target::new(boxes, labels)
    }
}

/// The model trained by a stage.
#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum StageModel {
    Pretext(PretextModel),
    Detector(Detector),
}

fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000);
    rng
}

/// A freshly initialized detector; identical for identical seeds.
pub fn build_detector(cfg: &ModelConfig, seed: u64) -> Result<(Detector, ParamStore)> {
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, cfg.clone(), &mut init_rng(seed))?;
    Ok((det, store))
}

/// The stage's model with parameters initialized from `seed`.
pub fn build_stage_model(stage: StageId, cfg: &ModelConfig, seed: u64) -> Result<(StageModel, ParamStore)> {
    match stage {
        StageId::EncoderPretrain => {
            let mut store = ParamStore::new();
            let m = PretextModel::new(&mut store, cfg.vit.clone(), cfg.num_classes, &mut init_rng(seed))?;
            Ok((StageModel::Pretext(m), store))
        }
        _ => build_detector(cfg, seed).map(|(d, s)| (StageModel::Detector(d), s)),
    }
}

/// Copies an earlier stage's weights into a stage's model.
///
/// Detector pretraining needs every backbone weight; finetuning needs all
/// parameters. Anything else in the checkpoint is reported as unused.
pub fn initialize_from(stage: StageId, store: &mut ParamStore, init: &Checkpoint) -> Result<LoadReport> {
    match stage {
        StageId::EncoderPretrain => load_params(store, &init.params, |_| false),
        StageId::DetectorPretrain => load_params(store, &init.params, |n| {
            n.strip_prefix(BACKBONE).is_some_and(|r| r.starts_with('.'))
        }),
        StageId::DetectorFinetune => load_params(store, &init.params, |_| true),
    }
}

fn sample_loss<'t>(
    model: &StageModel,
    p: &Binding<'t>,
    aug: &Augmented,
    w: &CostWeights,
    rng: &mut impl Rng,
) -> Result<(Var<'t>, Map<String, Value>)> {
    let mut parts = Map::new();
    match model {
        StageModel::Pretext(m) => {
            let (logits, grid) = m.logits(p, &aug.tensor)?;
            let labels = patch_labels(&aug.boxes, &aug.labels, grid, m.vit.config.patch_size, m.num_classes);
            let loss = logits.cross_entropy(&labels).scale(1.0 / labels.len() as f64);
            parts.insert("pretext_ce".into(), json!(loss.item()));
            Ok((loss, parts))
        }
        StageModel::Detector(det) => {
            let gt = aug.target()?;
            let out = det.forward_train(p, &aug.tensor, &gt, rng)?;
            let inputs = LossInputs {
                layers: &out.layers,
                encoder: Some(&out.encoder),
                segments: out.segments,
                dn: &out.dn,
                gt: &gt,
            };
            let matches = compute_matches(&inputs, w)?;
            let (loss, breakdown) = total_loss(&inputs, &matches, w)?;
            if let Value::Object(m) = serde_json::to_value(breakdown)? {
                parts = m;
            }
            Ok((loss, parts))
        }
    }
}

/// Live- and shadow-weight metrics on the validation split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalPair {
    pub live: EvalResult,
    pub ema: EvalResult,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub model: StageModel,
    pub load_report: Option<LoadReport>,
    /// Mean total loss of every iteration.
    pub losses: Vec<f64>,
    /// Metrics after the last iteration (detector stages with validation data).
    pub eval: Option<EvalPair>,
}

/// Evaluates live and EMA weights on `val` at `size`.
pub fn evaluate_pair(det: &Detector, store: &ParamStore, ema: &EmaState, val: &Split, size: usize) -> Result<EvalPair> {
    let mode = InferenceMode::Single { size, top_k: 100 };
    Ok(EvalPair {
        live: evaluate_model(det, store, &val.images, &val.dataset, &mode)?,
        ema: evaluate_model(det, &ema.weights(store)?, &val.images, &val.dataset, &mode)?,
    })
}

/// Trains one stage in memory.
///
/// Every random choice (initialization, data order, flips, denoising noise)
/// derives from `cfg.seed` and the stage, so runs are reproducible.
pub fn train_stage(
    cfg: &StageConfig,
    run: &RunConfig,
    data: &TrainData,
    init: Option<&Checkpoint>,
    log: &mut MetricsLog,
) -> Result<StageOutcome> {
    if data.train.is_empty() && cfg.iterations > 0 {
        return Err(invalid_arg!("stage {} has no training images", cfg.stage));
    }
    let model_cfg = run.model_config();
    let (model, mut store) = build_stage_model(cfg.stage, &model_cfg, cfg.seed)?;
    let load_report = init.map(|c| initialize_from(cfg.stage, &mut store, c)).transpose()?;
    let groups = build_optimizer_groups(&store, cfg.lr, cfg.layer_decay, model_cfg.vit.depth)?;
    let mut lrs = vec![0.0; store.len()];
    for g in &groups {
        for name in &g.params {
            lrs[store.names().iter().position(|n| n == name).expect("group of own names")] = g.lr;
        }
    }
    let schedule = Schedule {
        iterations: cfg.iterations,
        warmup_frac: cfg.warmup_frac,
        decay_at: cfg.decay_at,
        decay_factor: cfg.decay_factor,
    };
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut ema = EmaState::new(cfg.ema_decay, &store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(cfg.stage.index());
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut eval = None;

    for it in 0..cfg.iterations {
        let mut acc: Vec<Option<Tensor>> = vec![None; store.len()];
        let mut total = 0.0;
        let mut parts: Map<String, Value> = Map::new();
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..data.train.len()).collect();
                order.shuffle(&mut rng);
            }
            let idx = order.pop().expect("refilled");
            let flip = rng.random::<f64>() < cfg.hflip_prob;
            let aug = Augmented::new(&data.train[idx], &model_cfg.vit, cfg.image_size, flip);
            let tape = Tape::new();
            let p = store.bind(&tape, true);
            let (loss, sample_parts) = sample_loss(&model, &p, &aug, &cfg.loss, &mut rng)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::InvalidState(format!(
                    "non-finite loss at iteration {} of stage {}",
                    it + 1,
                    cfg.stage
                )));
            }
            total += value;
            for (k, v) in sample_parts {
                let prev = parts.get(&k).and_then(Value::as_f64).unwrap_or(0.0);
                parts.insert(k, json!(prev + v.as_f64().unwrap_or(0.0)));
            }
            let grads = tape.backward(loss);
            for (slot, v) in acc.iter_mut().zip(p.vars()) {
                if let Some(g) = grads.get(*v) {
                    match slot {
                        Some(a) => a.add_assign(g),
                        None => *slot = Some(g.clone()),
                    }
                }
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for g in acc.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
        }
        let grad_norm = clip_grad_norm(&mut acc, cfg.grad_clip);
        let factor = schedule.factor(it);
        let step_lrs: Vec<f64> = lrs.iter().map(|l| l * factor).collect();
        opt.update(&mut store, &acc, &step_lrs);
        ema_update(&mut ema, &store)?;
        losses.push(total * inv);

        let done = it + 1;
        if done % log_every(cfg) == 0 || done == cfg.iterations {
            let mut rec = Map::new();
            rec.insert("stage".into(), json!(cfg.stage.name()));
            rec.insert("iter".into(), json!(done));
            rec.insert("lr".into(), json!(cfg.lr * factor));
            rec.insert("loss".into(), json!(total * inv));
            rec.insert("grad_norm".into(), json!(grad_norm));
            for (k, v) in parts.iter() {
                rec.insert(k.clone(), json!(v.as_f64().unwrap_or(0.0) * inv));
            }
            log.record(rec)?;
        }
        let eval_now = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.iterations;
        if let (StageModel::Detector(det), Some(val), true) = (&model, &data.val, eval_now) {
            let pair = evaluate_pair(det, &store, &ema, val, cfg.image_size)?;
            for (which, r) in [("live", pair.live), ("ema", pair.ema)] {
                let mut rec = Map::new();
                rec.insert("stage".into(), json!(cfg.stage.name()));
                rec.insert("iter".into(), json!(done));
                rec.insert("weights".into(), json!(which));
                if let Value::Object(m) = serde_json::to_value(r)? {
                    rec.extend(m);
                }
                log.record(rec)?;
            }
            eval = Some(pair);
        }
    }

    let mut checkpoint = Checkpoint::capture(cfg.stage, cfg.iterations as u64, run.to_toml()?, run.hash()?, &store);
    checkpoint.ema = Some(ema);
    checkpoint.optimizer = Some(opt);
    Ok(StageOutcome {
        checkpoint,
        model,
        load_report,
        losses,
        eval,
    })
}

fn log_every(cfg: &StageConfig) -> usize {
    cfg.log_every.max(1)
}

/// Loads data and the initializing checkpoint named by `cfg`, then trains.
pub fn run_stage(cfg: &StageConfig, run: &RunConfig, log: &mut MetricsLog) -> Result<StageOutcome> {
    let init = cfg.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let data = TrainData::load(cfg)?;
    train_stage(cfg, run, &data, init.as_ref(), log)
}

/// Rebuilds a detector and its weights from a checkpoint; `use_ema`
/// selects the shadow weights.
pub fn detector_from_checkpoint(ckpt: &Checkpoint, use_ema: bool) -> Result<(Detector, ParamStore, RunConfig)> {
    let run = RunConfig::from_toml(&ckpt.config)?;
    if ckpt.stage == StageId::EncoderPretrain {
        return Err(Error::InvalidState("an encoder_pretrain checkpoint holds no detector".into()));
    }
    let (det, mut store) = build_detector(&run.model_config(), run.pipeline.seed)?;
    load_params(&mut store, &ckpt.params, |_| true)?;
    if use_ema {
        let ema = ckpt
            .ema
            .as_ref()
            .ok_or_else(|| Error::InvalidState("checkpoint has no EMA weights".into()))?;
        store = ema.weights(&store)?;
    }
    Ok((det, store, run))
}
