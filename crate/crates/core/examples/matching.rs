//! One-to-one assignment and its one-to-many extension over query groups.
//!
//! Each group of queries is matched to the ground truth independently, so
//! with `K` groups every object receives exactly `K` positive queries.
//!
//! ```text
//! cargo run --release --example matching
//! ```

use gdetr::assignment::{hungarian, matching_cost, CostMatrix, CostWeights, Target};
use gdetr::geometry::BoxN;
use gdetr_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let cost = CostMatrix::new(3, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0])?;
    let pairs = hungarian(&cost)?;
    println!("3x3 assignment {pairs:?}, cost {}", cost.total(&pairs));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gt = Target::new(
        vec![BoxN::new(0.3, 0.3, 0.2, 0.2)?, BoxN::new(0.7, 0.6, 0.3, 0.4)?],
        vec![0, 2],
    )?;
    let (groups, per_group, classes) = (4, 6, 3);
    let w = CostWeights::default();
    let mut counts = vec![0; gt.len()];
    for k in 0..groups {
        let boxes: Vec<BoxN> = (0..per_group)
            .map(|_| {
                BoxN::saturating(
                    rng.random(),
                    rng.random(),
                    rng.random_range(0.05..0.5),
                    rng.random_range(0.05..0.5),
                )
            })
            .collect();
        let logits = Tensor::new(
            [per_group, classes],
            (0..per_group * classes).map(|_| rng.random_range(-3.0..1.0)).collect(),
        );
        let matched = hungarian(&matching_cost(&logits, &boxes, &gt, &w))?;
        println!("group {k}: (query, object) {matched:?}");
        for (_, t) in matched {
            counts[t] += 1;
        }
    }
    println!("queries per object over {groups} groups: {counts:?}");
    Ok(())
}
