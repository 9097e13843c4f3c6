//! Run configuration: one TOML document, dotted-key overrides, and the
//! per-stage settings resolved from it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::CostWeights;
use crate::backbone::ViTConfig;
use crate::decoder::DecoderConfig;
use crate::error::{invalid_arg, invalid_config, Error, Result};
use crate::inference::TtaConfig;
use crate::model::ModelConfig;
use crate::query_engine::{DenoisingConfig, QueryGroupConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageId {
    /// Patch-classification pretext training of the backbone alone.
    EncoderPretrain,
    DetectorPretrain,
    DetectorFinetune,
}

impl StageId {
    pub const ALL: [StageId; 3] = [StageId::EncoderPretrain, StageId::DetectorPretrain, StageId::DetectorFinetune];

    pub fn name(self) -> &'static str {
        match self {
            StageId::EncoderPretrain => "encoder_pretrain",
            StageId::DetectorPretrain => "detector_pretrain",
            StageId::DetectorFinetune => "detector_finetune",
        }
    }

    pub fn index(self) -> u64 {
        self as u64
    }

    /// The stage whose checkpoint initializes this one.
    pub fn previous(self) -> Option<StageId> {
        match self {
            StageId::EncoderPretrain => None,
            StageId::DetectorPretrain => Some(StageId::EncoderPretrain),
            StageId::DetectorFinetune => Some(StageId::DetectorPretrain),
        }
    }

    /// File name of this stage's final checkpoint inside a run directory.
    pub fn checkpoint_file(self) -> String {
        format!("{}.ckpt", self.name())
    }
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_pretrain" | "1" | "i" => Ok(StageId::EncoderPretrain),
            "detector_pretrain" | "2" | "ii" => Ok(StageId::DetectorPretrain),
            "detector_finetune" | "3" | "iii" => Ok(StageId::DetectorFinetune),
            _ => Err(invalid_arg!(
                "unknown stage {s:?}; expected encoder_pretrain, detector_pretrain or detector_finetune"
            )),
        }
    }
}

/// Settings shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    pub seed: u64,
    /// Matching query groups during detector training.
    pub groups: usize,
    /// Upper bound on denoising queries per image.
    pub dn_queries: usize,
    /// Images per optimizer step.
    pub batch_size: usize,
    pub ema_decay: f64,
    pub weight_decay: f64,
    /// Fraction of iterations with linear warmup.
    pub warmup_frac: f64,
    /// Fraction of iterations after which the learning rate drops.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Max global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    /// Longer image side during encoder and detector pretraining.
    pub image_size: usize,
    /// Whether finetuning enlarges images by `scale_ratio`.
    pub scale_up: bool,
    pub scale_ratio: f64,
    pub hflip_prob: f64,
    pub log_every: usize,
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Keeps wall-clock fields out of the metric log.
    pub deterministic: bool,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            groups: 11,
            dn_queries: 100,
            batch_size: 2,
            ema_decay: 0.99,
            weight_decay: 1e-4,
            warmup_frac: 0.01,
            decay_at: 0.8,
            decay_factor: 0.1,
            grad_clip: 0.1,
            image_size: 128,
            scale_up: true,
            scale_ratio: 1.5,
            hflip_prob: 0.5,
            log_every: 50,
            eval_every: 0,
            deterministic: false,
        }
    }
}

/// Dataset locations; each directory holds `annotations.json` and `images/`.
/// Unset paths default to `train/` and `val/` inside the run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSettings {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    /// Keep only the first `holdout` validation images (by id) for
    /// validation and move the rest into the training set.
    pub holdout: Option<usize>,
}

/// Architecture settings; group and denoising counts live in [`PipelineSettings`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub num_classes: usize,
    pub vit: ViTConfig,
    pub decoder: DecoderConfig,
    pub queries_per_group: usize,
    pub dn_groups: Option<usize>,
    pub dn_pos_noise: f64,
    pub dn_neg_noise: f64,
    pub dn_label_flip: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let dn = DenoisingConfig::default();
        Self {
            num_classes: 3,
            vit: ViTConfig {
                embed_dim: 64,
                depth: 3,
                num_heads: 2,
                ..ViTConfig::default()
            },
            decoder: DecoderConfig {
                channels: 64,
                layers: 3,
                heads: 4,
                points: 4,
                levels: 4,
                ffn_dim: 256,
            },
            queries_per_group: 10,
            dn_groups: dn.groups,
            dn_pos_noise: dn.pos_noise,
            dn_neg_noise: dn.neg_noise,
            dn_label_flip: dn.label_flip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub iterations: usize,
    pub lr: f64,
    pub layer_decay: f64,
    /// Longer image side; derived from the pipeline settings when unset.
    pub image_size: Option<usize>,
}

impl StageSettings {
    fn with(iterations: usize, lr: f64, layer_decay: f64) -> Self {
        Self {
            iterations,
            lr,
            layer_decay,
            image_size: None,
        }
    }
}

impl Default for StageSettings {
    fn default() -> Self {
        Self::with(1000, 2e-4, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub encoder_pretrain: StageSettings,
    pub detector_pretrain: StageSettings,
    pub detector_finetune: StageSettings,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            encoder_pretrain: StageSettings::with(400, 1e-3, 1.0),
            detector_pretrain: StageSettings::with(3000, 4e-4, 0.8),
            detector_finetune: StageSettings::with(1000, 1e-4, 0.8),
        }
    }
}

impl Stages {
    pub fn get(&self, id: StageId) -> &StageSettings {
        match id {
            StageId::EncoderPretrain => &self.encoder_pretrain,
            StageId::DetectorPretrain => &self.detector_pretrain,
            StageId::DetectorFinetune => &self.detector_finetune,
        }
    }
}

/// Everything a run needs, as read from a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineSettings,
    pub data: DataSettings,
    pub model: ModelSection,
    pub loss: CostWeights,
    pub stages: Stages,
    pub tta: TtaConfig,
}

/// Fully resolved settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageId,
    pub train: PathBuf,
    pub val: PathBuf,
    pub holdout: Option<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub image_size: usize,
    pub layer_decay: f64,
    pub ema_decay: f64,
    pub seed: u64,
    /// Checkpoint of the previous stage, if any.
    pub init_checkpoint: Option<PathBuf>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub decay_at: f64,
    pub decay_factor: f64,
    pub grad_clip: f64,
    pub hflip_prob: f64,
    pub log_every: usize,
    pub eval_every: usize,
    pub deterministic: bool,
    pub loss: CostWeights,
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    /// Keys absent from the text keep their default values, including
    /// inside partially given tables.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| invalid_config!("{}", e.message()))?;
        let mut doc = toml::Table::try_from(RunConfig::default()).map_err(|e| invalid_config!("{e}"))?;
        merge(&mut doc, user);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| invalid_config!("{}", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Reads a config file; `None` starts from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) if !p.exists() => return Err(Error::MissingFile(p.to_path_buf())),
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid_config!("cannot serialize config: {e}"))
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:x}", Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.pipeline;
        if p.batch_size == 0 || p.image_size == 0 || p.log_every == 0 {
            return Err(invalid_config!("batch_size, image_size and log_every must be >= 1"));
        }
        if !(0.0..=1.0).contains(&p.ema_decay) {
            return Err(invalid_config!("ema_decay must lie in [0, 1], got {}", p.ema_decay));
        }
        if !(0.0..=1.0).contains(&p.warmup_frac) || !(0.0..=1.0).contains(&p.decay_at) || !(0.0..=1.0).contains(&p.hflip_prob) {
            return Err(invalid_config!("warmup_frac, decay_at and hflip_prob must lie in [0, 1]"));
        }
        if p.scale_ratio.is_nan() || p.scale_ratio <= 0.0 || p.weight_decay < 0.0 || p.grad_clip < 0.0 || p.decay_factor < 0.0 {
            return Err(invalid_config!(
                "scale_ratio must be positive; weight_decay, grad_clip and decay_factor non-negative"
            ));
        }
        for id in StageId::ALL {
            let s = self.stages.get(id);
            if s.lr.is_nan() || s.lr < 0.0 || s.layer_decay.is_nan() || s.layer_decay <= 0.0 || s.layer_decay > 1.0 {
                return Err(invalid_config!("stage {id}: lr must be >= 0 and layer_decay in (0, 1]"));
            }
        }
        if p.scale_up {
            if let Some(size) = self.stages.detector_finetune.image_size {
                if size != self.scaled_size() {
                    return Err(invalid_config!(
                        "stages.detector_finetune.image_size = {size} contradicts scale_up ({} x {} = {})",
                        p.image_size,
                        p.scale_ratio,
                        self.scaled_size()
                    ));
                }
            }
        }
        self.loss.validate()?;
        self.tta.validate()?;
        self.model_config().validate()
    }

    fn scaled_size(&self) -> usize {
        (self.pipeline.image_size as f64 * self.pipeline.scale_ratio).round() as usize
    }

    /// The detector architecture, with group and denoising counts taken from the pipeline settings.
    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            num_classes: m.num_classes,
            vit: m.vit.clone(),
            decoder: m.decoder,
            queries: QueryGroupConfig {
                groups: self.pipeline.groups,
                queries_per_group: m.queries_per_group,
            },
            denoising: DenoisingConfig {
                total: self.pipeline.dn_queries,
                groups: m.dn_groups,
                pos_noise: m.dn_pos_noise,
                neg_noise: m.dn_neg_noise,
                label_flip: m.dn_label_flip,
            },
        }
    }

    /// Longer image side used by a stage.
    pub fn image_size(&self, id: StageId) -> usize {
        match (self.stages.get(id).image_size, id) {
            (Some(s), _) => s,
            (None, StageId::DetectorFinetune) if self.pipeline.scale_up => self.scaled_size(),
            (None, _) => self.pipeline.image_size,
        }
    }

    /// Train and validation directories for a run in `run_dir`.
    pub fn data_dirs(&self, run_dir: &Path) -> (PathBuf, PathBuf) {
        (
            self.data.train.clone().unwrap_or_else(|| run_dir.join("train")),
            self.data.val.clone().unwrap_or_else(|| run_dir.join("val")),
        )
    }

    /// Settings of stage `id` for a run writing into `run_dir`.
    pub fn stage(&self, id: StageId, run_dir: &Path) -> StageConfig {
        let p = &self.pipeline;
        let s = self.stages.get(id);
        let (train, val) = self.data_dirs(run_dir);
        StageConfig {
            stage: id,
            train,
            val,
            holdout: self.data.holdout,
            iterations: s.iterations,
            lr: s.lr,
            image_size: self.image_size(id),
            layer_decay: s.layer_decay,
            ema_decay: p.ema_decay,
            seed: p.seed,
            init_checkpoint: id.previous().map(|prev| run_dir.join(prev.checkpoint_file())),
            batch_size: p.batch_size,
            weight_decay: p.weight_decay,
            warmup_frac: p.warmup_frac,
            decay_at: p.decay_at,
            decay_factor: p.decay_factor,
            grad_clip: p.grad_clip,
            hflip_prob: p.hflip_prob,
            log_every: p.log_every,
            eval_every: p.eval_every,
            deterministic: p.deterministic,
            loss: self.loss,
        }
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML table, creating tables as needed.
/// The value is parsed as TOML and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid_arg!("override {spec:?} is not of the form key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid_arg!("override key {key:?} has an empty component"));
    }
    let value = parse_value(raw.trim());
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut table = doc;
    for part in path {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid_arg!("override {key:?}: {part} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn serialization_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let o = [
            "pipeline.groups=1",
            "model.decoder.layers=2",
            "data.train=/tmp/x",
            "tta.scales=[96, 128]",
        ]
        .map(String::from);
        let cfg = RunConfig::from_toml_with("", &o).unwrap();
        assert_eq!(cfg.pipeline.groups, 1);
        assert_eq!(cfg.model_config().queries.total(), cfg.model.queries_per_group);
        assert_eq!(cfg.model.decoder.layers, 2);
        assert_eq!(
            cfg.data_dirs(Path::new("/r")),
            (PathBuf::from("/tmp/x"), PathBuf::from("/r/val"))
        );
        assert_eq!(cfg.tta.scales, vec![96, 128]);
    }

    #[test]
    fn partial_tables_keep_stage_defaults() {
        let cfg = RunConfig::from_toml_with(
            "[stages.detector_finetune]\niterations = 7\n",
            &["stages.detector_pretrain.iterations=5".into()],
        )
        .unwrap();
        let d = Stages::default();
        assert_eq!(cfg.stages.detector_pretrain.iterations, 5);
        assert_eq!(cfg.stages.detector_pretrain.lr, d.detector_pretrain.lr);
        assert_eq!(cfg.stages.detector_finetune.layer_decay, d.detector_finetune.layer_decay);
    }

    #[test]
    fn unknown_keys_fail() {
        let err = RunConfig::from_toml_with("", &["pipeline.grups=3".into()]).unwrap_err();
        assert!(err.to_string().contains("grups"), "{err}");
        assert!(RunConfig::from_toml_with("", &["novalue".into()]).is_err());
    }

    #[test]
    fn finetune_scales_up() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.image_size(StageId::DetectorPretrain), 128);
        assert_eq!(cfg.image_size(StageId::DetectorFinetune), 192);
        let off = RunConfig::from_toml_with("", &["pipeline.scale_up=false".into()]).unwrap();
        assert_eq!(off.image_size(StageId::DetectorFinetune), 128);
        let bad = ["stages.detector_finetune.image_size=160".to_string()];
        assert!(RunConfig::from_toml_with("", &bad).is_err());
    }

    #[test]
    fn stage_chain_paths() {
        let cfg = RunConfig::default();
        let s = cfg.stage(StageId::DetectorFinetune, Path::new("/runs/a"));
        assert_eq!(s.init_checkpoint, Some(PathBuf::from("/runs/a/detector_pretrain.ckpt")));
        assert_eq!(cfg.stage(StageId::EncoderPretrain, Path::new("/r")).init_checkpoint, None);
        assert_eq!("iii".parse::<StageId>().unwrap(), StageId::DetectorFinetune);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::from_toml_with("", &["pipeline.seed=5".into()]).unwrap();
        assert_eq!(a.hash().unwrap(), RunConfig::default().hash().unwrap());
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
