//! A deliberately naive COCO box-AP evaluator and random micro-datasets.

use gdetr::data::{AnnotationRecord, Category, Dataset, ImageInfo, ImagePredictions};
use gdetr::geometry::{BoxA, Detection};
use rand::Rng;

fn overlap(d: &BoxA, g: &BoxA, crowd: bool) -> f64 {
    let w = (d.x2.min(g.x2) - d.x1.max(g.x1)).max(0.0);
    let h = (d.y2.min(g.y2) - d.y1.max(g.y1)).max(0.0);
    let i = w * h;
    let ad = (d.x2 - d.x1) * (d.y2 - d.y1);
    let ag = (g.x2 - g.x1) * (g.y2 - g.y1);
    let u = if crowd { ad } else { ad + ag - i };
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Status {
    Tp,
    Fp,
    Skip,
}

/// AP at one IoU threshold for one category and area range; `None` without ground truth.
fn ap(preds: &[ImagePredictions], gt: &Dataset, cat: u64, t: f64, lo: f64, hi: f64) -> Option<Vec<f64>> {
    let outside = |a: f64| a < lo || a > hi;
    let mut npos = 0;
    let mut scored: Vec<(f64, Status)> = Vec::new();
    for img in &gt.images {
        let gts: Vec<&AnnotationRecord> = gt
            .records
            .iter()
            .filter(|r| r.image_id == img.id && r.category_id == cat)
            .collect();
        let ignore: Vec<bool> = gts.iter().map(|g| g.iscrowd || outside(g.area)).collect();
        npos += ignore.iter().filter(|i| !**i).count();
        let mut dets: Vec<Detection> = preds
            .iter()
            .filter(|p| p.image_id == img.id)
            .flat_map(|p| p.detections.iter().copied())
            .filter(|d| d.category as u64 == cat)
            .collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        dets.truncate(100);
        let mut taken = vec![false; gts.len()];
        for d in &dets {
            let thr = t.min(1.0 - 1e-10);
            let candidates: Vec<(usize, f64)> = (0..gts.len())
                .filter(|&g| !taken[g] || gts[g].iscrowd)
                .map(|g| (g, overlap(&d.bbox, &gts[g].bbox, gts[g].iscrowd)))
                .filter(|&(_, o)| o >= thr)
                .collect();
            // real objects win over ignored ones; then highest overlap, later index on ties
            let best = |want_ignored: bool| {
                candidates
                    .iter()
                    .filter(|(g, _)| ignore[*g] == want_ignored)
                    .fold(None, |acc: Option<(usize, f64)>, &(g, o)| match acc {
                        Some((_, bo)) if o < bo => acc,
                        _ => Some((g, o)),
                    })
            };
            let status = match best(false).or_else(|| best(true)) {
                Some((g, _)) => {
                    taken[g] = true;
                    if ignore[g] {
                        Status::Skip
                    } else {
                        Status::Tp
                    }
                }
                None if outside(d.bbox.area()) => Status::Skip,
                None => Status::Fp,
            };
            scored.push((d.score, status));
        }
    }
    if npos == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut points = Vec::new();
    let (mut tp, mut n) = (0usize, 0usize);
    for (_, s) in scored {
        if s == Status::Skip {
            continue;
        }
        n += 1;
        if s == Status::Tp {
            tp += 1;
        }
        points.push((tp as f64 / npos as f64, tp as f64 / n as f64));
    }
    Some(
        (0..=100)
            .map(|k| {
                let r = k as f64 / 100.0;
                points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .collect(),
    )
}

/// `[mAP, AP50, AP75, APs, APm, APl]` with -1 for buckets without ground truth.
pub fn brute_force_eval(preds: &[ImagePredictions], gt: &Dataset) -> [f64; 6] {
    let all_t: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let metric = |ts: &[f64], lo: f64, hi: f64| {
        let mut vals = Vec::new();
        for c in &gt.categories {
            for &t in ts {
                if let Some(v) = ap(preds, gt, c.id, t, lo, hi) {
                    vals.extend(v);
                }
            }
        }
        if vals.is_empty() {
            -1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let (s, l) = (32.0 * 32.0, 96.0 * 96.0);
    [
        metric(&all_t, 0.0, 1e10),
        metric(&all_t[..1], 0.0, 1e10),
        metric(&all_t[5..6], 0.0, 1e10),
        metric(&all_t, 0.0, s),
        metric(&all_t, s, l),
        metric(&all_t, l, 1e10),
    ]
}

fn random_box(rng: &mut impl Rng, size: f64) -> BoxA {
    let w = rng.random_range(4.0..150.0);
    let h = rng.random_range(4.0..150.0);
    let x = rng.random_range(0.0..size - w);
    let y = rng.random_range(0.0..size - h);
    BoxA::from_xywh(x, y, w, h).unwrap()
}

/// Up to 4 images with up to 5 objects each, plus noisy detections.
pub fn random_micro_case(rng: &mut impl Rng) -> (Dataset, Vec<ImagePredictions>) {
    let size = 200.0;
    let n_img = rng.random_range(1..=4);
    let cats: Vec<Category> = (1..=2)
        .map(|id| Category {
            id,
            name: format!("c{id}"),
        })
        .collect();
    let mut images = Vec::new();
    let mut records = Vec::new();
    let mut preds = Vec::new();
    for i in 0..n_img as u64 {
        images.push(ImageInfo {
            id: i + 1,
            file_name: String::new(),
            width: 200,
            height: 200,
        });
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..=5) {
            let b = random_box(rng, size);
            let cat = rng.random_range(1..=2);
            records.push(AnnotationRecord {
                id: records.len() as u64 + 1,
                image_id: i + 1,
                file_name: String::new(),
                category_id: cat,
                bbox: b,
                area: b.area(),
                iscrowd: rng.random_bool(0.05),
            });
            if rng.random_bool(0.8) {
                let j = |v: f64, r: &mut dyn rand::RngCore| v + r.random_range(-8.0..8.0);
                let (x1, y1) = (j(b.x1, rng), j(b.y1, rng));
                let (x2, y2) = (j(b.x2, rng).max(x1 + 1.0), j(b.y2, rng).max(y1 + 1.0));
                let c = if rng.random_bool(0.9) { cat } else { 3 - cat };
                dets.push(Detection {
                    bbox: BoxA::new(x1, y1, x2, y2).unwrap(),
                    category: c as usize,
                    score: rng.random(),
                });
            }
        }
        for _ in 0..rng.random_range(0..=3) {
            dets.push(Detection {
                bbox: random_box(rng, size),
                category: rng.random_range(1..=2),
                score: rng.random(),
            });
        }
        preds.push(ImagePredictions {
            image_id: i + 1,
            detections: dets,
        });
    }
    (Dataset::new(images, records, cats).unwrap(), preds)
}
