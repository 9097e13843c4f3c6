//! Runs the three training stages on generated shapes, in memory.
//!
//! ```text
//! cargo run --release --example train_shapes -- [key=value ...]
//! ```
//!
//! Extra arguments are config overrides, e.g. `pipeline.groups=1` or
//! `stages.detector_pretrain.iterations=500`.

use std::time::Instant;

use gdetr::data::{generate_shapes, ShapesSpec, Split};
use gdetr::pipeline::{train_stage, MetricsLog, RunConfig, StageId, TrainData};

fn main() -> anyhow::Result<()> {
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let run = RunConfig::from_toml_with("data.holdout = 200\n", &overrides)?;
    let train = Split::from(generate_shapes(
        &ShapesSpec {
            seed: 1,
            ..ShapesSpec::default()
        },
        1800,
    )?);
    let val = Split::from(generate_shapes(
        &ShapesSpec {
            seed: 2,
            first_id: 100_000,
            ..ShapesSpec::default()
        },
        400,
    )?);
    let data = TrainData::new(&train, Some(val), run.data.holdout)?;
    println!(
        "{} training images, {} validation images",
        data.train.len(),
        data.val.as_ref().map_or(0, |v| v.len())
    );

    let mut log = MetricsLog::in_memory(true);
    let mut previous = None;
    for stage in StageId::ALL {
        let cfg = run.stage(stage, std::path::Path::new("."));
        let t = Instant::now();
        let out = train_stage(&cfg, &run, &data, previous.as_ref(), &mut log)?;
        let n = out.losses.len();
        let head: f64 = out.losses.iter().take(20).sum::<f64>() / 20f64.min(n as f64).max(1.0);
        let tail: f64 = out.losses.iter().rev().take(20).sum::<f64>() / 20f64.min(n as f64).max(1.0);
        println!(
            "{stage}: {n} iterations at {} px in {:.0}s, loss {head:.3} -> {tail:.3}",
            cfg.image_size,
            t.elapsed().as_secs_f64()
        );
        if let Some(e) = out.eval {
            println!("  live {}\n  ema  {}", e.live, e.ema);
        }
        previous = Some(out.checkpoint);
    }
    Ok(())
}
