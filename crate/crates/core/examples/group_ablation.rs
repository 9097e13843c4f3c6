//! Compares one query group against several at a fixed iteration budget.
//!
//! ```text
//! cargo run --release --example group_ablation -- [iterations] [seeds] [key=value ...]
//! ```
//!
//! Each seed runs the encoder pretext stage and then the detector stage
//! twice, once per group count, and reports validation AP50 of the live
//! weights.

use gdetr::data::{generate_shapes, ShapesSpec, Split};
use gdetr::pipeline::{train_stage, MetricsLog, RunConfig, StageId, TrainData};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations: usize = args.next().map_or(Ok(800), |s| s.parse())?;
    let seeds: u64 = args.next().map_or(Ok(3), |s| s.parse())?;
    let extra: Vec<String> = args.collect();

    let train = Split::from(generate_shapes(
        &ShapesSpec {
            seed: 1,
            ..ShapesSpec::default()
        },
        2000,
    )?);
    let val = Split::from(generate_shapes(
        &ShapesSpec {
            seed: 2,
            first_id: 100_000,
            ..ShapesSpec::default()
        },
        200,
    )?);
    let data = TrainData::new(&train, Some(val), None)?;
    let here = std::path::Path::new(".");

    let mut results: Vec<(usize, Vec<f64>)> = vec![(1, Vec::new()), (11, Vec::new())];
    for seed in 0..seeds {
        let mut base = vec![
            format!("pipeline.seed={seed}"),
            format!("stages.detector_pretrain.iterations={iterations}"),
        ];
        base.extend(extra.iter().cloned());
        let run = RunConfig::from_toml_with("", &base)?;
        let mut log = MetricsLog::in_memory(false);
        let encoder = train_stage(&run.stage(StageId::EncoderPretrain, here), &run, &data, None, &mut log)?.checkpoint;
        for (groups, aps) in &mut results {
            let mut o = base.clone();
            o.push(format!("pipeline.groups={groups}"));
            let run = RunConfig::from_toml_with("", &o)?;
            let out = train_stage(
                &run.stage(StageId::DetectorPretrain, here),
                &run,
                &data,
                Some(&encoder),
                &mut log,
            )?;
            let ap50 = out.eval.map_or(f64::NAN, |e| e.live.ap50);
            println!("seed {seed} groups {groups:>2}: AP50 {ap50:.4}");
            aps.push(ap50);
        }
    }
    for (groups, aps) in results {
        println!("groups {groups:>2}: median AP50 {:.4}", median(aps));
    }
    Ok(())
}
