//! Compares single-scale inference with test-time augmentation on a
//! trained checkpoint.
//!
//! ```text
//! cargo run --release --example tta -- <checkpoint> <data-dir> [scale,scale,...]
//! ```
//!
//! `<data-dir>` is a split written by `gdetr gen-data` (e.g. `runs/val`).

use std::path::PathBuf;

use anyhow::Context;
use gdetr::data::Split;
use gdetr::inference::{evaluate_model, InferenceMode, SlotCorrespondence, TtaConfig};
use gdetr::pipeline::{detector_from_checkpoint, load_checkpoint};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let usage = "usage: tta <checkpoint> <data-dir> [scales]";
    let ckpt = load_checkpoint(&PathBuf::from(args.next().context(usage)?))?;
    let data = Split::load(&PathBuf::from(args.next().context(usage)?))?;
    let (det, store, run) = detector_from_checkpoint(&ckpt, false)?;
    let size = run.image_size(ckpt.stage);
    let scales: Vec<usize> = match args.next() {
        Some(s) => s.split(',').map(str::parse).collect::<Result<_, _>>()?,
        None => run.tta.scales.clone(),
    };

    let eval = |mode: &InferenceMode| evaluate_model(&det, &store, &data.images, &data.dataset, mode);
    println!("single {size} px      {}", eval(&InferenceMode::Single { size, top_k: 100 })?);
    for correspondence in [SlotCorrespondence::Index, SlotCorrespondence::ProposalIou] {
        for flip in [false, true] {
            let cfg = TtaConfig {
                scales: scales.clone(),
                flip,
                correspondence,
                ..run.tta.clone()
            };
            println!(
                "{scales:?} flip {flip:<5} {correspondence:?}  {}",
                eval(&InferenceMode::Tta(cfg))?
            );
        }
    }
    Ok(())
}
