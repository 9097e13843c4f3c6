use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[pipeline]
groups = 1
dn_queries = 10
image_size = 64

[model]
queries_per_group = 5

[model.vit]
embed_dim = 16
depth = 1
num_heads = 2

[model.decoder]
channels = 16
layers = 1
heads = 2
points = 2
ffn_dim = 32

[stages.encoder_pretrain]
iterations = 2

[stages.detector_pretrain]
iterations = 3

[stages.detector_finetune]
iterations = 2

[tta]
scales = [64, 96]
"#;

fn gdetr(out: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_gdetr"))
        .env_remove("GDETR_OUT")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap();
    out
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

/// Generates a small dataset and trains all stages with the tiny config.
fn trained(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    ok(gdetr(
        dir,
        &["gen-data", "--override", "train_images=6", "--override", "val_images=3"],
    ));
    ok(gdetr(dir, &["--config", cfg.to_str().unwrap(), "--deterministic", "train"]));
    cfg
}

#[test]
fn train_eval_and_tta_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = trained(d);
    let cfg = cfg.to_str().unwrap();
    for id in ["encoder_pretrain", "detector_pretrain", "detector_finetune"] {
        assert!(d.join(format!("{id}.ckpt")).exists(), "{id}");
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join(format!("{id}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(manifest["config"]["pipeline"]["groups"], 1, "{manifest}");
    }

    let first = ok(gdetr(d, &["--config", cfg, "eval"]));
    let again = ok(gdetr(d, &["--config", cfg, "eval"]));
    assert_eq!(first, again);
    assert!(first.contains("AP50"), "{first}");
    assert!(d.join("eval.json").exists());

    let tta = |extra: &[&str]| {
        ok(gdetr(
            d,
            &[&["--config", cfg, "tta", "--scales", "64,80", "--flip", "false"], extra].concat(),
        ));
        std::fs::read_to_string(d.join("results.json")).unwrap()
    };
    let live = tta(&[]);
    let results: serde_json::Value = serde_json::from_str(&live).unwrap();
    assert!(!results.as_array().unwrap().is_empty());
    assert_eq!(live, tta(&[]));
    assert_ne!(live, tta(&["--use-ema"]));
}

#[test]
fn training_a_later_stage_first_names_the_missing_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(gdetr(
        d,
        &["gen-data", "--override", "train_images=2", "--override", "val_images=1"],
    ));
    let o = gdetr(d, &["train", "--stage", "detector_finetune"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("detector_pretrain.ckpt") && err.contains("run stage detector_pretrain first"),
        "{err}"
    );
}

#[test]
fn eval_without_a_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = gdetr(dir.path(), &["eval"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("detector_finetune.ckpt"));
}

#[test]
fn gen_data_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(gdetr(
            d,
            &[
                "--seed",
                "5",
                "gen-data",
                "--override",
                "train_images=3",
                "--override",
                "val_images=2",
            ],
        ));
    }
    assert_eq!(tree(a.path()), tree(b.path()));
    assert!(tree(a.path()).iter().any(|(p, _)| p.ends_with("annotations.json")));
}

/// Every file under `root` except manifests, as (relative path, bytes), sorted.
fn tree(root: &Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("manifest.json") {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
