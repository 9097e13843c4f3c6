use std::path::Path;

use gdetr::data::{generate_shapes, ShapesSpec, Split};
use gdetr::inference::predict;
use gdetr::pipeline::{
    build_detector, detector_from_checkpoint, load_checkpoint, run_stage, save_checkpoint, train_stage, Checkpoint, MetricsLog,
    RunConfig, StageId, TrainData,
};
use gdetr::Error;

const TINY: &str = r#"
[pipeline]
groups = 3
dn_queries = 20
image_size = 64
log_every = 1
deterministic = true

[model]
queries_per_group = 5

[model.vit]
embed_dim = 16
depth = 2
num_heads = 2

[model.decoder]
channels = 16
layers = 2
heads = 2
points = 2
ffn_dim = 32
"#;

fn tiny(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_toml_with(TINY, &o).unwrap()
}

fn data(n: usize, seed: u64) -> TrainData {
    let spec = ShapesSpec {
        image_size: 64,
        size_bands: [[8, 15], [16, 30], [32, 48]],
        seed,
        ..ShapesSpec::default()
    };
    let train = Split::from(generate_shapes(&spec, n).unwrap());
    let val = Split::from(
        generate_shapes(
            &ShapesSpec {
                seed: seed + 100,
                first_id: 10_000,
                ..spec
            },
            4,
        )
        .unwrap(),
    );
    TrainData::new(&train, Some(val), None).unwrap()
}

fn chain(run: &RunConfig, data: &TrainData, upto: StageId) -> Vec<Checkpoint> {
    let mut log = MetricsLog::in_memory(false);
    let mut out: Vec<Checkpoint> = Vec::new();
    for stage in StageId::ALL {
        let ckpt = train_stage(&run.stage(stage, Path::new(".")), run, data, out.last(), &mut log)
            .unwrap()
            .checkpoint;
        out.push(ckpt);
        if stage == upto {
            break;
        }
    }
    out
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn detector_loss_decreases() {
    let d = data(24, 1);
    let mut ratios: Vec<f64> = (0..3)
        .map(|seed| {
            let seed_o = format!("pipeline.seed={seed}");
            let run = tiny(&[
                &seed_o,
                "stages.encoder_pretrain.iterations=0",
                "stages.detector_pretrain.iterations=200",
            ]);
            let enc = chain(&run, &d, StageId::EncoderPretrain).pop().unwrap();
            let mut log = MetricsLog::in_memory(false);
            let out = train_stage(
                &run.stage(StageId::DetectorPretrain, Path::new(".")),
                &run,
                &d,
                Some(&enc),
                &mut log,
            )
            .unwrap();
            mean(&out.losses[180..]) / mean(&out.losses[..20])
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[1] < 0.8, "median last/first loss ratio {ratios:?}");
}

#[test]
fn zero_iterations_return_the_initial_weights() {
    let run = tiny(&[
        "stages.detector_pretrain.iterations=0",
        "stages.encoder_pretrain.iterations=2",
    ]);
    let d = data(6, 2);
    let ckpts = chain(&run, &d, StageId::DetectorPretrain);
    let (_, store) = build_detector(&run.model_config(), run.pipeline.seed).unwrap();
    let enc = &ckpts[0];
    let det = &ckpts[1];
    assert_eq!(det.iteration, 0);
    for (name, value) in &det.params {
        let expected = if name.starts_with("backbone.") {
            enc.param(name).unwrap().clone()
        } else {
            store.get_by_name(name).unwrap().clone()
        };
        assert_eq!(value, &expected, "{name}");
    }
}

#[test]
fn finetune_starts_from_the_pretrained_detector() {
    let run = tiny(&[
        "stages.encoder_pretrain.iterations=2",
        "stages.detector_pretrain.iterations=3",
        "stages.detector_finetune.iterations=0",
    ]);
    let d = data(6, 3);
    let ckpts = chain(&run, &d, StageId::DetectorFinetune);
    let (pre, fin) = (&ckpts[1], &ckpts[2]);
    assert_eq!(pre.params, fin.params);
    let (det_a, store_a, _) = detector_from_checkpoint(pre, false).unwrap();
    let (det_b, store_b, _) = detector_from_checkpoint(fin, false).unwrap();
    let img = &d.train[0].image;
    assert_eq!(
        predict(&det_a, &store_a, img, 96, 20).unwrap(),
        predict(&det_b, &store_b, img, 96, 20).unwrap()
    );
}

#[test]
fn identical_runs_give_identical_logs_and_checkpoints() {
    let run = tiny(&[
        "stages.encoder_pretrain.iterations=3",
        "stages.detector_pretrain.iterations=4",
        "stages.detector_finetune.iterations=2",
        "pipeline.eval_every=2",
    ]);
    let d = data(8, 4);
    let once = || {
        let mut log = MetricsLog::in_memory(!run.pipeline.deterministic);
        let mut prev: Option<Checkpoint> = None;
        for stage in StageId::ALL {
            prev = Some(
                train_stage(&run.stage(stage, Path::new(".")), &run, &d, prev.as_ref(), &mut log)
                    .unwrap()
                    .checkpoint,
            );
        }
        (log.lines().to_vec(), prev.unwrap().to_bytes().unwrap())
    };
    let (a, ca) = once();
    let (b, cb) = once();
    assert!(!a.is_empty());
    assert!(a.iter().all(|l| !l.contains("elapsed")));
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn missing_previous_checkpoint_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny(&[]);
    let d = data(4, 5);
    d.val.as_ref().unwrap().save(&dir.path().join("val")).unwrap();
    let err = run_stage(
        &run.stage(StageId::DetectorFinetune, dir.path()),
        &run,
        &mut MetricsLog::in_memory(false),
    )
    .unwrap_err();
    match err {
        Error::MissingFile(p) => assert!(p.ends_with("detector_pretrain.ckpt"), "{p:?}"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn run_stage_reads_and_writes_disk() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny(&["stages.encoder_pretrain.iterations=2"]);
    let d = data(4, 6);
    let train = Split::from(
        generate_shapes(
            &ShapesSpec {
                image_size: 64,
                size_bands: [[8, 15], [16, 30], [32, 48]],
                seed: 6,
                ..ShapesSpec::default()
            },
            4,
        )
        .unwrap(),
    );
    train.save(&dir.path().join("train")).unwrap();
    d.val.as_ref().unwrap().save(&dir.path().join("val")).unwrap();
    let cfg = run.stage(StageId::EncoderPretrain, dir.path());
    let out = run_stage(&cfg, &run, &mut MetricsLog::in_memory(false)).unwrap();
    let path = dir.path().join(StageId::EncoderPretrain.checkpoint_file());
    save_checkpoint(&path, &out.checkpoint).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap().params, out.checkpoint.params);
}
