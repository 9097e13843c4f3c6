mod common;

use common::oracle::{brute_force_eval, random_micro_case};
use gdetr::data::ImagePredictions;
use gdetr::eval::{evaluate, EvalConfig};
use gdetr::geometry::{hflip, Detection};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_brute_force_on_random_micro_datasets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..500 {
        let (gt, preds) = random_micro_case(&mut rng);
        let fast = evaluate(&preds, &gt, &EvalConfig::default()).unwrap().as_array();
        let slow = brute_force_eval(&preds, &gt);
        for (a, b) in fast.iter().zip(slow) {
            assert!((a - b).abs() < 1e-6, "case {case}: {fast:?} vs {slow:?}");
        }
    }
}

#[test]
fn low_scored_false_positive_never_raises_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (gt, mut preds) = random_micro_case(&mut rng);
        let before = evaluate(&preds, &gt, &EvalConfig::default()).unwrap().as_array();
        let min = preds
            .iter()
            .flat_map(|p| p.detections.iter().map(|d| d.score))
            .fold(1.0, f64::min);
        preds[0].detections.push(Detection {
            bbox: gdetr::geometry::BoxA::new(190.0, 190.0, 199.0, 199.0).unwrap(),
            category: 1,
            score: min / 2.0,
        });
        let after = evaluate(&preds, &gt, &EvalConfig::default()).unwrap().as_array();
        for (a, b) in after.iter().zip(before) {
            assert!(*a <= b + 1e-12);
        }
    }
}

#[test]
fn flipping_everything_preserves_metrics() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..50 {
        let (mut gt, preds) = random_micro_case(&mut rng);
        let before = evaluate(&preds, &gt, &EvalConfig::default()).unwrap();
        for r in &mut gt.records {
            r.bbox = hflip(r.bbox, 200.0);
        }
        let flipped: Vec<ImagePredictions> = preds
            .iter()
            .map(|p| ImagePredictions {
                image_id: p.image_id,
                detections: p
                    .detections
                    .iter()
                    .map(|d| Detection {
                        bbox: hflip(d.bbox, 200.0),
                        ..*d
                    })
                    .collect(),
            })
            .collect();
        let after = evaluate(&flipped, &gt, &EvalConfig::default()).unwrap();
        for (a, b) in after.as_array().iter().zip(before.as_array()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
