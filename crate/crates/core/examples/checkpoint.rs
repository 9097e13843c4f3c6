//! Saves a freshly initialized detector, reloads it and checks that
//! predictions survive the round trip bit for bit. Also shows that a
//! corrupted file is rejected.
//!
//! ```text
//! cargo run --release --example checkpoint
//! ```

use gdetr::data::{generate_shapes, ShapesSpec};
use gdetr::inference::predict;
use gdetr::pipeline::{
    build_detector, detector_from_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, RunConfig, StageId,
};

fn main() -> anyhow::Result<()> {
    let run = RunConfig::from_toml_with("", &[])?;
    let (det, store) = build_detector(&run.model_config(), run.pipeline.seed)?;
    let ckpt = Checkpoint::capture(StageId::DetectorPretrain, 0, run.to_toml()?, run.hash()?, &store);

    let dir = std::env::temp_dir().join(format!("gdetr-checkpoint-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("detector.ckpt");
    save_checkpoint(&path, &ckpt)?;
    println!("{} parameters, {} bytes", ckpt.params.len(), std::fs::metadata(&path)?.len());

    let (det2, store2, _) = detector_from_checkpoint(&load_checkpoint(&path)?, false)?;
    let image = &generate_shapes(&ShapesSpec::default(), 1)?.images[0];
    let a = predict(&det, &store, image, 128, 10)?;
    let b = predict(&det2, &store2, image, 128, 10)?;
    println!("predictions identical after reload: {}", a == b);

    let mut bytes = std::fs::read(&path)?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes)?;
    match load_checkpoint(&path) {
        Ok(_) => println!("corrupted checkpoint loaded (unexpected)"),
        Err(e) => println!("corrupted checkpoint rejected: {e}"),
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
