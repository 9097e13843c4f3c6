//! COCO box AP: 101-point interpolated precision over IoU thresholds
//! 0.50:0.05:0.95, averaged over categories, with small/medium/large splits.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{AnnotationRecord, Dataset, ImagePredictions};
use crate::error::{invalid_arg, Result};
use crate::geometry::BoxA;

/// Value reported for a metric with no ground truth in its bucket.
pub const UNDEFINED: f64 = -1.0;

pub const AREA_SMALL: f64 = 32.0 * 32.0;
pub const AREA_LARGE: f64 = 96.0 * 96.0;

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

pub fn recall_thresholds() -> [f64; 101] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

/// The six headline COCO box metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    #[serde(rename = "APs")]
    pub ap_small: f64,
    #[serde(rename = "APm")]
    pub ap_medium: f64,
    #[serde(rename = "APl")]
    pub ap_large: f64,
}

impl EvalResult {
    pub fn as_array(&self) -> [f64; 6] {
        [self.map, self.ap50, self.ap75, self.ap_small, self.ap_medium, self.ap_large]
    }

    pub const NAMES: [&'static str; 6] = ["mAP", "AP50", "AP75", "APs", "APm", "APl"];
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (n, v)) in Self::NAMES.iter().zip(self.as_array()).enumerate() {
            if i > 0 {
                write!(f, "  ")?;
            }
            write!(f, "{n} {v:.4}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_dets: 100 }
    }
}

#[derive(Clone, Copy)]
struct Gt {
    bbox: BoxA,
    area: f64,
    crowd: bool,
}

#[derive(Clone, Copy)]
struct Dt {
    bbox: BoxA,
    score: f64,
}

/// IoU, or intersection over the detection's area for crowd regions.
fn overlap(d: BoxA, g: &Gt) -> f64 {
    let iw = (d.x2.min(g.bbox.x2) - d.x1.max(g.bbox.x1)).max(0.0);
    let ih = (d.y2.min(g.bbox.y2) - d.y1.max(g.bbox.y1)).max(0.0);
    let inter = iw * ih;
    let denom = if g.crowd { d.area() } else { d.area() + g.bbox.area() - inter };
    if denom <= 0.0 {
        0.0
    } else {
        inter / denom
    }
}

/// Per (image, category, area range) matching outcome.
struct ImageEval {
    /// Detection scores in descending order (truncated to max_dets).
    scores: Vec<f64>,
    /// `[threshold][detection]`: matched to a non-ignored ground truth.
    matched: Vec<Vec<bool>>,
    /// `[threshold][detection]`: excluded from counting.
    ignored: Vec<Vec<bool>>,
    num_gt: usize,
}

fn evaluate_image(gts: &[Gt], dts: &[Dt], range: (f64, f64), max_dets: usize) -> ImageEval {
    let thresholds = iou_thresholds();
    let out_of_range = |a: f64| a < range.0 || a > range.1;
    // non-ignored ground truth first, stable
    let mut g_order: Vec<usize> = (0..gts.len()).collect();
    let g_ignore: Vec<bool> = gts.iter().map(|g| g.crowd || out_of_range(g.area)).collect();
    g_order.sort_by_key(|&i| g_ignore[i]);
    let mut d_order: Vec<usize> = (0..dts.len()).collect();
    d_order.sort_by(|&a, &b| dts[b].score.total_cmp(&dts[a].score));
    d_order.truncate(max_dets);

    let ious: Vec<Vec<f64>> = d_order
        .iter()
        .map(|&d| g_order.iter().map(|&g| overlap(dts[d].bbox, &gts[g])).collect())
        .collect();
    let gi: Vec<bool> = g_order.iter().map(|&g| g_ignore[g]).collect();
    let crowd: Vec<bool> = g_order.iter().map(|&g| gts[g].crowd).collect();

    let mut matched = Vec::with_capacity(thresholds.len());
    let mut ignored = Vec::with_capacity(thresholds.len());
    for &t in &thresholds {
        let mut g_taken = vec![false; g_order.len()];
        let mut dm = vec![false; d_order.len()];
        let mut dig = vec![false; d_order.len()];
        for (di, row) in ious.iter().enumerate() {
            let mut best = t.min(1.0 - 1e-10);
            let mut m: Option<usize> = None;
            for (g, &iou) in row.iter().enumerate() {
                if g_taken[g] && !crowd[g] {
                    continue;
                }
                if let Some(mi) = m {
                    if !gi[mi] && gi[g] {
                        break;
                    }
                }
                if iou < best {
                    continue;
                }
                best = iou;
                m = Some(g);
            }
            if let Some(g) = m {
                dig[di] = gi[g];
                dm[di] = true;
                g_taken[g] = true;
            }
        }
        for (di, &d) in d_order.iter().enumerate() {
            if !dm[di] && out_of_range(dts[d].bbox.area()) {
                dig[di] = true;
            }
        }
        // matched-and-not-ignored is what counts as a true positive
        matched.push(dm.iter().zip(&dig).map(|(&m, &i)| m && !i).collect());
        ignored.push(dig);
    }
    ImageEval {
        scores: d_order.iter().map(|&d| dts[d].score).collect(),
        matched,
        ignored,
        num_gt: gi.iter().filter(|&&i| !i).count(),
    }
}

/// Interpolated precision at each recall threshold for IoU threshold `thr`,
/// or `None` when the bucket has no ground truth.
fn category_precision(evals: &[ImageEval], thr: usize) -> Option<Vec<f64>> {
    let num_gt: usize = evals.iter().map(|e| e.num_gt).sum();
    if num_gt == 0 {
        return None;
    }
    // (score, image, det) merged in descending score, stable over image order
    let mut all: Vec<(f64, usize, usize)> = evals
        .iter()
        .enumerate()
        .flat_map(|(i, e)| e.scores.iter().enumerate().map(move |(d, &s)| (s, i, d)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut rc = Vec::new();
    let mut pr = Vec::new();
    for &(_, i, d) in &all {
        if evals[i].ignored[thr][d] {
            continue;
        }
        if evals[i].matched[thr][d] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        rc.push(tp / num_gt as f64);
        pr.push(tp / (tp + fp));
    }
    for i in (1..pr.len()).rev() {
        if pr[i] > pr[i - 1] {
            pr[i - 1] = pr[i];
        }
    }
    Some(
        recall_thresholds()
            .iter()
            .map(|&r| {
                let k = rc.partition_point(|&x| x < r);
                pr.get(k).copied().unwrap_or(0.0)
            })
            .collect(),
    )
}

fn mean_defined(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    if n == 0 {
        UNDEFINED
    } else {
        s / n as f64
    }
}

/// Scores `predictions` (category field = category id) against `gt`.
pub fn evaluate(predictions: &[ImagePredictions], gt: &Dataset, cfg: &EvalConfig) -> Result<EvalResult> {
    for p in predictions {
        if gt.image(p.image_id).is_none() {
            return Err(invalid_arg!("prediction for unknown image id {}", p.image_id));
        }
        for d in &p.detections {
            if gt.category_index(d.category as u64).is_none() {
                return Err(invalid_arg!("prediction uses unknown category id {}", d.category));
            }
        }
    }
    let mut gts: HashMap<(u64, u64), Vec<Gt>> = HashMap::new();
    for r in &gt.records {
        gts.entry((r.image_id, r.category_id)).or_default().push(gt_of(r));
    }
    let mut dts: HashMap<(u64, u64), Vec<Dt>> = HashMap::new();
    for p in predictions {
        for d in &p.detections {
            dts.entry((p.image_id, d.category as u64)).or_default().push(Dt {
                bbox: d.bbox,
                score: d.score,
            });
        }
    }
    let ranges = [(0.0, 1e10), (0.0, AREA_SMALL), (AREA_SMALL, AREA_LARGE), (AREA_LARGE, 1e10)];
    // precision[range][threshold][category] -> per recall threshold values
    let mut per_range: Vec<Vec<Vec<f64>>> = Vec::new();
    for &range in &ranges {
        let mut per_thr = vec![Vec::new(); iou_thresholds().len()];
        for cat in &gt.categories {
            let evals: Vec<ImageEval> = gt
                .images
                .iter()
                .map(|img| {
                    let key = (img.id, cat.id);
                    let g = gts.get(&key).map_or(&[][..], Vec::as_slice);
                    let d = dts.get(&key).map_or(&[][..], Vec::as_slice);
                    evaluate_image(g, d, range, cfg.max_dets)
                })
                .collect();
            for (t, slot) in per_thr.iter_mut().enumerate() {
                if let Some(p) = category_precision(&evals, t) {
                    slot.extend(p);
                }
            }
        }
        per_range.push(per_thr);
    }
    let all = |r: usize, thr: &[usize]| mean_defined(thr.iter().flat_map(|&t| per_range[r][t].iter().copied()));
    let every: Vec<usize> = (0..iou_thresholds().len()).collect();
    Ok(EvalResult {
        map: all(0, &every),
        ap50: all(0, &[0]),
        ap75: all(0, &[5]),
        ap_small: all(1, &every),
        ap_medium: all(2, &every),
        ap_large: all(3, &every),
    })
}

fn gt_of(r: &AnnotationRecord) -> Gt {
    Gt {
        bbox: r.bbox,
        area: r.area,
        crowd: r.iscrowd,
    }
}
