//! Builds a denoising segment and prints the self-attention mask of a
//! training sequence: denoising groups first, then the matching groups.
//!
//! ```text
//! cargo run --release --example query_groups
//! ```

use gdetr::geometry::BoxN;
use gdetr::query_engine::{build_attention_mask, make_denoising_queries, DenoisingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let gt = vec![(BoxN::new(0.25, 0.25, 0.2, 0.2)?, 0), (BoxN::new(0.6, 0.7, 0.3, 0.2)?, 1)];
    let cfg = DenoisingConfig {
        total: 8,
        ..DenoisingConfig::default()
    };
    let dn = make_denoising_queries(&gt, &cfg, 3, &mut ChaCha8Rng::seed_from_u64(0))?;
    println!("{} denoising groups of {} queries", dn.groups, dn.per_group);
    for i in 0..dn.len() {
        let b = dn.anchors[i].to_array();
        println!(
            "  {:>3} label {} target {:?} box [{:.2} {:.2} {:.2} {:.2}]",
            if dn.positive[i] { "pos" } else { "neg" },
            dn.labels[i],
            dn.targets[i],
            b[0],
            b[1],
            b[2],
            b[3]
        );
    }

    let (k, n) = (3, 4);
    let mask = build_attention_mask(k, n, dn.groups, dn.per_group);
    println!(
        "\nattention mask, '#' = blocked ({} denoising + {k}x{n} matching queries)",
        dn.len()
    );
    for i in 0..mask.size() {
        let row: String = (0..mask.size()).map(|j| if mask.blocked(i, j) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}
