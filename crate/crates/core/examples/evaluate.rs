//! Scores jittered ground truth with the COCO-style evaluator.
//!
//! Perfect boxes give 1.0 everywhere; growing jitter shows AP75 dropping
//! before AP50.
//!
//! ```text
//! cargo run --release --example evaluate
//! ```

use gdetr::data::{generate_shapes, ImagePredictions, ShapesSpec};
use gdetr::eval::{evaluate, EvalConfig};
use gdetr::geometry::{BoxA, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let shapes = generate_shapes(
        &ShapesSpec {
            seed: 5,
            ..ShapesSpec::default()
        },
        50,
    )?;
    let ds = &shapes.dataset;
    let by_image = ds.records_by_image();
    for jitter in [0.0, 0.05, 0.15, 0.3] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds: Vec<ImagePredictions> = ds
            .images
            .iter()
            .map(|info| {
                let detections = by_image
                    .get(&info.id)
                    .into_iter()
                    .flatten()
                    .map(|r| {
                        let [x, y, w, h] = r.bbox.to_xywh();
                        let mut j = || rng.random_range(-jitter..=jitter);
                        let (dx, dy, dw, dh) = (j() * w, j() * h, j() * w, j() * h);
                        let bbox = BoxA::from_xywh(x + dx, y + dy, (w + dw).max(1.0), (h + dh).max(1.0)).expect("positive size");
                        Detection {
                            bbox,
                            category: r.category_id as usize,
                            score: rng.random_range(0.5..1.0),
                        }
                    })
                    .collect();
                ImagePredictions {
                    image_id: info.id,
                    detections,
                }
            })
            .collect();
        let r = evaluate(&preds, ds, &EvalConfig::default())?;
        println!("jitter {jitter:.2}: {r}");
    }
    Ok(())
}
