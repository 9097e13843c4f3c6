//! Renders a small shapes dataset to disk as PNG files plus COCO JSON.
//!
//! ```text
//! cargo run --release --example gen_data -- <out-dir> [train-images] [val-images]
//! ```

use std::path::PathBuf;

use anyhow::Context;
use gdetr::data::{GenerationPlan, Split};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().context("usage: gen_data <out-dir> [train] [val]")?);
    let mut plan = GenerationPlan::default();
    if let Some(n) = args.next() {
        plan.train_images = n.parse()?;
    }
    if let Some(n) = args.next() {
        plan.val_images = n.parse()?;
    }
    let (train, val) = plan.generate()?;
    for (name, part) in [("train", train), ("val", val)] {
        let records = &part.dataset.records;
        let per_class = part.dataset.categories.iter().map(|c| {
            let n = records.iter().filter(|r| r.category_id == c.id).count();
            format!("{} {n}", c.name)
        });
        println!(
            "{name}: {} images, {} objects ({})",
            part.images.len(),
            records.len(),
            per_class.collect::<Vec<_>>().join(", ")
        );
        Split::from(part).save(&out.join(name))?;
    }
    println!("written to {}", out.display());
    Ok(())
}
