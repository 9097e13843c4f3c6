//! Procedural dataset of filled circles, squares and triangles.
//!
//! Object sizes are drawn from three bands so the dataset has small
//! (< 32² px), medium and large (≥ 96² px) instances. Objects never overlap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{AnnotationRecord, Category, Dataset, ImageInfo};
use super::Image;
use crate::error::{invalid_config, Result};
use crate::geometry::BoxA;

pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side-length bands `[lo, hi]` in pixels for small, medium and large objects.
    pub size_bands: [[usize; 2]; 3],
    /// Relative frequency of each band.
    pub band_weights: [f64; 3],
    /// Max per-channel deviation of an object's color from its category's base color.
    pub color_jitter: u8,
    /// Max per-pixel additive noise.
    pub noise: u8,
    pub seed: u64,
    /// First image id; ids are consecutive.
    pub first_id: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            image_size: 128,
            min_objects: 1,
            max_objects: 5,
            size_bands: [[12, 31], [32, 80], [96, 112]],
            band_weights: [0.4, 0.45, 0.15],
            color_jitter: 60,
            noise: 12,
            seed: 0,
            first_id: 1,
        }
    }
}

impl ShapesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return Err(invalid_config!(
                "object count range [{}, {}] is empty",
                self.min_objects,
                self.max_objects
            ));
        }
        for [lo, hi] in self.size_bands {
            if lo == 0 || lo > hi || hi > self.image_size {
                return Err(invalid_config!(
                    "size band [{lo}, {hi}] does not fit a {} px image",
                    self.image_size
                ));
            }
        }
        if self.band_weights.iter().any(|w| w.is_nan() || *w < 0.0) || self.band_weights.iter().sum::<f64>() <= 0.0 {
            return Err(invalid_config!("band weights must be non-negative and not all zero"));
        }
        Ok(())
    }
}

pub fn shape_categories() -> Vec<Category> {
    SHAPE_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| Category {
            id: i as u64 + 1,
            name: n.to_string(),
        })
        .collect()
}

/// Generated images with their annotations.
#[derive(Clone, Debug)]
pub struct ShapesDataset {
    pub images: Vec<Image>,
    pub dataset: Dataset,
}

/// Whether pixel center `(x, y)` lies inside shape `label` drawn in `b`.
pub fn shape_contains(label: usize, b: BoxA, x: f64, y: f64) -> bool {
    if x < b.x1 || x >= b.x2 || y < b.y1 || y >= b.y2 {
        return false;
    }
    match label {
        0 => {
            let (cx, cy) = ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0);
            let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
            ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0
        }
        1 => true,
        _ => {
            // apex at top center, base along the bottom edge
            let t = (y - b.y1) / b.height();
            let half = t * b.width() / 2.0;
            let cx = (b.x1 + b.x2) / 2.0;
            (x - cx).abs() <= half
        }
    }
}

const BASE_COLORS: [[u8; 3]; 3] = [[220, 70, 60], [60, 200, 90], [70, 110, 230]];

fn pick_band(spec: &ShapesSpec, rng: &mut impl Rng) -> usize {
    let total: f64 = spec.band_weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in spec.band_weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    2
}

fn overlaps(a: BoxA, b: BoxA) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

/// Renders image `index` of the dataset described by `spec`.
pub fn render_one(spec: &ShapesSpec, index: u64) -> (Image, Vec<(BoxA, usize)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let s = spec.image_size;
    let target = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects: Vec<(BoxA, usize)> = Vec::new();
    for _ in 0..target {
        let [lo, hi] = spec.size_bands[pick_band(spec, &mut rng)];
        let label = rng.random_range(0..SHAPE_NAMES.len());
        for _attempt in 0..30 {
            let side = rng.random_range(lo..=hi);
            let x = rng.random_range(0..=s - side) as f64;
            let y = rng.random_range(0..=s - side) as f64;
            let b = BoxA {
                x1: x,
                y1: y,
                x2: x + side as f64,
                y2: y + side as f64,
            };
            if objects.iter().all(|(o, _)| !overlaps(*o, b)) {
                objects.push((b, label));
                break;
            }
        }
    }
    if objects.is_empty() {
        // a smallest-band object always fits on an empty canvas
        let side = spec.size_bands[0][0];
        objects.push((
            BoxA {
                x1: 0.0,
                y1: 0.0,
                x2: side as f64,
                y2: side as f64,
            },
            rng.random_range(0..SHAPE_NAMES.len()),
        ));
    }

    let bg: [u8; 3] = std::array::from_fn(|_| rng.random_range(0..60));
    let mut img = Image::new(s, s, bg);
    for &(b, label) in &objects {
        let j = spec.color_jitter as i32;
        let color: [u8; 3] =
            std::array::from_fn(|c| (BASE_COLORS[label][c] as i32 + rng.random_range(-j..=j)).clamp(0, 255) as u8);
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                if shape_contains(label, b, x as f64 + 0.5, y as f64 + 0.5) {
                    img.put(x, y, color);
                }
            }
        }
    }
    if spec.noise > 0 {
        let n = spec.noise as i32;
        for y in 0..s {
            for x in 0..s {
                let px = img.get(x, y);
                let noisy = px.map(|v| (v as i32 + rng.random_range(-n..=n)).clamp(0, 255) as u8);
                img.put(x, y, noisy);
            }
        }
    }
    (img, objects)
}

/// Generates `count` images; identical for identical `spec`.
pub fn generate_shapes(spec: &ShapesSpec, count: usize) -> Result<ShapesDataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(count);
    let mut infos = Vec::with_capacity(count);
    let mut records = Vec::new();
    for i in 0..count as u64 {
        let (img, objects) = render_one(spec, i);
        let id = spec.first_id + i;
        let file_name = format!("{id:06}.png");
        for (b, label) in objects {
            records.push(AnnotationRecord {
                id: records.len() as u64 + 1,
                image_id: id,
                file_name: file_name.clone(),
                category_id: label as u64 + 1,
                bbox: b,
                area: b.area(),
                iscrowd: false,
            });
        }
        infos.push(ImageInfo {
            id,
            file_name,
            width: spec.image_size as u32,
            height: spec.image_size as u32,
        });
        images.push(img);
    }
    Ok(ShapesDataset {
        images,
        dataset: Dataset::new(infos, records, shape_categories())?,
    })
}

/// Sizes and rendering settings of a generated train/val pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationPlan {
    pub train_images: usize,
    pub val_images: usize,
    /// Settings of the training split; validation uses `seed + 1` and ids
    /// continuing after the training ids.
    pub shapes: ShapesSpec,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        Self {
            train_images: 2000,
            val_images: 200,
            shapes: ShapesSpec::default(),
        }
    }
}

impl GenerationPlan {
    pub fn val_spec(&self) -> ShapesSpec {
        ShapesSpec {
            seed: self.shapes.seed.wrapping_add(1),
            first_id: self.shapes.first_id + self.train_images as u64,
            ..self.shapes.clone()
        }
    }

    pub fn generate(&self) -> Result<(ShapesDataset, ShapesDataset)> {
        Ok((
            generate_shapes(&self.shapes, self.train_images)?,
            generate_shapes(&self.val_spec(), self.val_images)?,
        ))
    }
}
