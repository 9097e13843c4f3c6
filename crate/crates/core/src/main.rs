//! Command-line front end: data generation, staged training, evaluation and TTA.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gdetr::data::{save_results, GenerationPlan, Split};
use gdetr::eval::{evaluate, EvalConfig};
use gdetr::inference::{predict_dataset, InferenceMode, TtaConfig};
use gdetr::pipeline::{
    apply_override, detector_from_checkpoint, load_checkpoint, run_stage, save_checkpoint, MetricsLog, RunConfig, RunManifest,
    StageId, TrainData,
};

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "GDETR_OUT";

#[derive(Parser)]
#[command(name = "gdetr", version, about = "Group-query DETR detector on a plain ViT")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file read by the command (generation plan for gen-data, run config otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override applied after the config file, e.g. pipeline.groups=1.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for all randomness.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Keep wall-clock fields out of metric logs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory [default: $GDETR_OUT, else ./runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset into <out>/train and <out>/val.
    GenData,
    /// Train one stage, or all three in order.
    Train {
        /// encoder_pretrain, detector_pretrain, detector_finetune, or all.
        #[arg(long, default_value = "all")]
        stage: String,
    },
    /// Evaluate a detector checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        target: Target,
        /// Evaluate the EMA weights instead of the live ones.
        #[arg(long)]
        use_ema: bool,
        /// One pass at the checkpoint's training size instead of the configured TTA.
        #[arg(long)]
        single_scale: bool,
    },
    /// Write TTA detections for the validation split as COCO results.
    Tta {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        use_ema: bool,
        /// Comma-separated longer-side sizes.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        /// Add mirrored branches (true/false).
        #[arg(long)]
        flip: Option<bool>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        topk: Option<usize>,
    },
}

#[derive(Args)]
struct Target {
    /// Detector checkpoint [default: <out>/detector_finetune.ckpt].
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory [default: the config's validation split].
    #[arg(long)]
    data: Option<PathBuf>,
}

impl Common {
    fn out_dir(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    fn run_config(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("pipeline.seed={s}"));
        }
        if self.deterministic {
            overrides.push("pipeline.deterministic=true".into());
        }
        Ok(RunConfig::load(self.config.as_deref(), &overrides)?)
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = cli.common.out_dir();
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    match &cli.command {
        Command::GenData => gen_data(&cli.common, &out),
        Command::Train { stage } => train(&cli.common, &out, stage),
        Command::Eval {
            target,
            use_ema,
            single_scale,
        } => eval(&cli.common, &out, target, *use_ema, *single_scale),
        Command::Tta {
            target,
            use_ema,
            scales,
            flip,
            tau,
            topk,
        } => {
            let mut cfg = cli.common.run_config()?.tta;
            if let Some(s) = scales {
                cfg.scales = s.clone();
            }
            cfg.flip = flip.unwrap_or(cfg.flip);
            cfg.tau = tau.unwrap_or(cfg.tau);
            cfg.top_k = topk.unwrap_or(cfg.top_k);
            tta(&cli.common, &out, target, *use_ema, cfg)
        }
    }
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
        None => String::new(),
    };
    let mut doc: toml::Table = text.parse().context("invalid generation plan")?;
    for o in &common.overrides {
        apply_override(&mut doc, o)?;
    }
    let mut plan: GenerationPlan = toml::Value::Table(doc).try_into().context("invalid generation plan")?;
    if let Some(s) = common.seed {
        plan.shapes.seed = s;
    }
    let manifest = serde_json::json!({
        "command": "gen-data",
        "version": env!("CARGO_PKG_VERSION"),
        "seed": plan.shapes.seed,
        "plan": plan,
        "outputs": {"train": out.join("train"), "val": out.join("val")},
    });
    std::fs::write(out.join("gen-data.manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    let (train, val) = plan.generate()?;
    Split::from(train).save(&out.join("train"))?;
    Split::from(val).save(&out.join("val"))?;
    println!(
        "wrote {} training and {} validation images to {}",
        plan.train_images,
        plan.val_images,
        out.display()
    );
    Ok(())
}

fn train(common: &Common, out: &Path, stage: &str) -> Result<()> {
    let run = common.run_config()?;
    let stages: Vec<StageId> = if stage == "all" {
        StageId::ALL.to_vec()
    } else {
        vec![stage.parse()?]
    };
    for id in stages {
        let cfg = run.stage(id, out);
        if let Some(init) = &cfg.init_checkpoint {
            if !init.exists() {
                bail!(
                    "stage {id} starts from {}, which does not exist; run stage {} first",
                    init.display(),
                    id.previous().expect("has an init checkpoint")
                );
            }
        }
        let ckpt_path = out.join(id.checkpoint_file());
        let metrics_path = out.join(format!("{id}.metrics.jsonl"));
        let mut manifest = RunManifest::new(&format!("train --stage {id}"), &run)?;
        manifest.outputs.insert("checkpoint".into(), ckpt_path.display().to_string());
        manifest.outputs.insert("metrics".into(), metrics_path.display().to_string());
        manifest.write(&out.join(format!("{id}.manifest.json")))?;

        let mut log = MetricsLog::create(&metrics_path, !run.pipeline.deterministic)?;
        let outcome = run_stage(&cfg, &run, &mut log)?;
        save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
        if let Some(r) = &outcome.load_report {
            println!(
                "{id}: loaded {} tensors, {} freshly initialized, {} unused",
                r.loaded.len(),
                r.fresh.len(),
                r.unused.len()
            );
        }
        let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
        println!(
            "{id}: {} iterations, final loss {last:.4}, checkpoint {}",
            cfg.iterations,
            ckpt_path.display()
        );
        if let Some(e) = outcome.eval {
            println!("{id}: live {}\n{id}: ema  {}", e.live, e.ema);
        }
    }
    Ok(())
}

struct Loaded {
    det: gdetr::model::Detector,
    store: gdetr::nn::ParamStore,
    val: Split,
    train_size: usize,
}

fn load_target(common: &Common, out: &Path, target: &Target, use_ema: bool) -> Result<Loaded> {
    let ckpt_path = target
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join(StageId::DetectorFinetune.checkpoint_file()));
    let ckpt = load_checkpoint(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
    let (det, store, trained) = detector_from_checkpoint(&ckpt, use_ema)?;
    let run = common.run_config()?;
    let val = match &target.data {
        Some(dir) => Split::load(dir)?,
        None => {
            let (train_dir, val_dir) = run.data_dirs(out);
            TrainData::new(&Split::load(&train_dir)?, Some(Split::load(&val_dir)?), run.data.holdout)?
                .val
                .expect("validation split given")
        }
    };
    if val.dataset.num_classes() != det.config.num_classes {
        bail!(
            "checkpoint predicts {} classes but {} has {} categories",
            det.config.num_classes,
            target.data.as_deref().unwrap_or(Path::new("the validation split")).display(),
            val.dataset.num_classes()
        );
    }
    Ok(Loaded {
        det,
        store,
        val,
        train_size: trained.image_size(ckpt.stage),
    })
}

fn eval(common: &Common, out: &Path, target: &Target, use_ema: bool, single_scale: bool) -> Result<()> {
    let l = load_target(common, out, target, use_ema)?;
    let mode = if single_scale {
        InferenceMode::Single {
            size: l.train_size,
            top_k: 100,
        }
    } else {
        InferenceMode::Tta(common.run_config()?.tta)
    };
    let preds = predict_dataset(&l.det, &l.store, &l.val.images, &l.val.dataset, &mode)?;
    let result = evaluate(&preds, &l.val.dataset, &EvalConfig::default())?;
    println!("{result}");
    let name = format!(
        "eval{}{}.json",
        if use_ema { "_ema" } else { "" },
        if single_scale { "_single" } else { "" }
    );
    std::fs::write(out.join(name), serde_json::to_string_pretty(&result)?)?;
    Ok(())
}

fn tta(common: &Common, out: &Path, target: &Target, use_ema: bool, cfg: TtaConfig) -> Result<()> {
    let l = load_target(common, out, target, use_ema)?;
    let preds = predict_dataset(&l.det, &l.store, &l.val.images, &l.val.dataset, &InferenceMode::Tta(cfg))?;
    let path = out.join("results.json");
    save_results(&path, &preds)?;
    let result = evaluate(&preds, &l.val.dataset, &EvalConfig::default())?;
    println!("{result}");
    println!("wrote {}", path.display());
    Ok(())
}
