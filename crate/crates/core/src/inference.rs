//! Single-pass prediction and multi-scale / flip test-time augmentation.
//!
//! TTA fuses at two levels. Query features from every branch are averaged
//! slot by slot and re-decoded through the prediction heads; the resulting
//! set and the per-branch detection sets are then clustered by IoU and
//! averaged. Slots correspond by index unless [`SlotCorrespondence`] says
//! otherwise.

use std::cmp::Ordering;

use gdetr_autograd::{Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian, CostMatrix};
use crate::backbone::ImageTensor;
use crate::data::{Dataset, Image, ImagePredictions};
use crate::error::{invalid_arg, invalid_config, Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalResult};
use crate::geometry::{iou, to_absolute, BoxA, BoxN, Detection, DetectionSet};
use crate::model::Detector;
use crate::nn::ParamStore;

/// An image resized so its longer side is `size`, optionally mirrored.
pub fn prepare_image(image: &Image, det: &Detector, size: usize, flip: bool) -> ImageTensor {
    let resized = image.resize_longer_side(size);
    let resized = if flip { resized.hflip() } else { resized };
    ImageTensor::from_image(&resized, &det.config.vit)
}

/// Last-layer query state of one inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOutputs {
    /// Normalized query features `[N, C]`.
    pub hidden: Tensor,
    /// Boxes refined by the last layer, `[N, 4]`, in the branch's own frame.
    pub reference: Tensor,
    /// Box-head output in inverse-sigmoid space, `[N, 4]`.
    pub delta: Tensor,
    /// Two-stage proposals the queries started from, `[N, 4]`, in the branch's own frame.
    pub proposals: Tensor,
    /// Whether the branch saw a mirrored image.
    pub flipped: bool,
}

/// Group-0 query outputs for one image.
pub fn query_outputs(det: &Detector, store: &ParamStore, img: &ImageTensor, flipped: bool) -> Result<QueryOutputs> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let out = det.forward_infer(&p, img)?;
    let last = out.last();
    Ok(QueryOutputs {
        hidden: (*last.hidden.value()).clone(),
        reference: (*last.reference.value()).clone(),
        delta: (*det.decoder.box_delta(&p, last.hidden).value()).clone(),
        proposals: (*out.encoder.boxes.value()).clone(),
        flipped,
    })
}

/// The `top_k` highest-scoring `(query, class)` pairs, scores being
/// per-class sigmoids. Boxes are mapped to a `width x height` image and
/// clipped to it; `category` is the model's class index.
pub fn top_pairs(logits: &Tensor, boxes: &[BoxN], top_k: usize, width: f64, height: f64) -> DetectionSet {
    let classes = logits.cols();
    let mut pairs: Vec<(usize, f64)> = logits
        .data()
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, 1.0 / (1.0 + (-l).exp())))
        .collect();
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs.truncate(top_k);
    pairs
        .into_iter()
        .map(|(i, score)| {
            let b = boxes[i / classes];
            let bbox = to_absolute(b, width, height)
                .unwrap_or(BoxA {
                    x1: 0.0,
                    y1: 0.0,
                    x2: 0.0,
                    y2: 0.0,
                })
                .clip(width, height);
            Detection {
                bbox,
                category: i % classes,
                score,
            }
        })
        .collect()
}

/// Group-0 detections for `image` evaluated at longer side `size`, in the
/// original image's pixel frame. No NMS.
pub fn predict(det: &Detector, store: &ParamStore, image: &Image, size: usize, top_k: usize) -> Result<DetectionSet> {
    let q = query_outputs(det, store, &prepare_image(image, det, size, false), false)?;
    let fused = fuse_query_features(&[q], &[])?;
    decode_fused(det, store, &fused, image, top_k)
}

/// Which query slots of different branches are averaged together.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotCorrespondence {
    /// Slot `i` of every branch.
    #[default]
    Index,
    /// Slots re-paired to the first branch by a maximum-IoU assignment of
    /// their proposals, flips undone first.
    ProposalIou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    /// Longer-side sizes of the scale branches.
    pub scales: Vec<usize>,
    /// Adds a mirrored branch for every scale.
    pub flip: bool,
    /// Per-scale weights for query-feature fusion; empty means uniform.
    pub weights: Vec<f64>,
    /// IoU at or above which detections of different branches merge.
    pub tau: f64,
    pub top_k: usize,
    /// Detections scoring below this are dropped before fusion.
    pub score_threshold: f64,
    pub correspondence: SlotCorrespondence,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            // around the default finetuning size of 192
            scales: vec![160, 192, 224],
            flip: true,
            weights: Vec::new(),
            tau: 0.6,
            top_k: 100,
            score_threshold: 0.0,
            correspondence: SlotCorrespondence::Index,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(invalid_config!(
                "TTA needs at least one positive scale, got {:?}",
                self.scales
            ));
        }
        if !self.weights.is_empty() && self.weights.len() != self.scales.len() {
            return Err(invalid_config!(
                "{} TTA weights given for {} scales",
                self.weights.len(),
                self.scales.len()
            ));
        }
        if self.weights.iter().any(|w| w.is_nan() || *w < 0.0)
            || (!self.weights.is_empty() && self.weights.iter().sum::<f64>() <= 0.0)
        {
            return Err(invalid_config!("TTA weights must be non-negative with a positive sum"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(invalid_config!("tau must lie in [0, 1], got {}", self.tau));
        }
        Ok(())
    }

    /// `(scale, flipped, weight)` for every branch, weights summing to 1.
    ///
    /// A scale listed more than once is a single branch carrying the summed
    /// weight of its entries.
    pub fn branches(&self) -> Vec<(usize, bool, f64)> {
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (i, &s) in self.scales.iter().enumerate() {
            let w = self.weights.get(i).copied().unwrap_or(1.0);
            match merged.iter_mut().find(|m| m.0 == s) {
                Some(m) => m.1 += if self.weights.is_empty() { 0.0 } else { w },
                None => merged.push((s, w)),
            }
        }
        let flips: &[bool] = if self.flip { &[false, true] } else { &[false] };
        let total: f64 = merged.iter().map(|m| m.1).sum::<f64>() * flips.len() as f64;
        merged
            .into_iter()
            .flat_map(|(s, w)| flips.iter().map(move |&f| (s, f, w / total)))
            .collect()
    }
}

/// Slot-wise fused query state, expressed in the unflipped frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedQuerySet {
    pub hidden: Tensor,
    pub anchors: Vec<BoxN>,
    pub delta: Tensor,
    /// `(weight, flipped)` of each contributing branch.
    pub provenance: Vec<(f64, bool)>,
}

/// Weighted slot-wise average of query features, anchors and box deltas.
///
/// Anchors of flipped branches are mirrored back and the x-offset of their
/// deltas negated; content features are used as-is. Empty `weights` means
/// uniform weights.
pub fn fuse_query_features(branches: &[QueryOutputs], weights: &[f64]) -> Result<FusedQuerySet> {
    let first = branches
        .first()
        .ok_or_else(|| invalid_arg!("query fusion needs at least one branch"))?;
    let n = first.hidden.rows();
    for b in branches {
        if b.hidden.rows() != n || b.reference.rows() != n || b.delta.rows() != n {
            return Err(Error::InvalidState(format!(
                "query fusion expects {n} slots per branch, got {}",
                b.hidden.rows()
            )));
        }
    }
    let weights: Vec<f64> = if weights.is_empty() {
        vec![1.0; branches.len()]
    } else if weights.len() == branches.len() {
        weights.to_vec()
    } else {
        return Err(invalid_arg!("{} weights for {} branches", weights.len(), branches.len()));
    };
    let total: f64 = weights.iter().sum();
    let mut hidden = Tensor::zeros(first.hidden.shape().to_vec());
    let mut anchors = Tensor::zeros([n, 4]);
    let mut delta = Tensor::zeros([n, 4]);
    for (b, &w) in branches.iter().zip(&weights) {
        let w = w / total;
        hidden.axpy(w, &b.hidden);
        let (mut r, mut d) = (b.reference.clone(), b.delta.clone());
        if b.flipped {
            for i in 0..n {
                let row = r.row_mut(i);
                row[0] = 1.0 - row[0];
                d.row_mut(i)[0] = -d.row(i)[0];
            }
        }
        anchors.axpy(w, &r);
        delta.axpy(w, &d);
    }
    Ok(FusedQuerySet {
        hidden,
        anchors: anchors
            .data()
            .chunks(4)
            .map(|c| BoxN::saturating(c[0], c[1], c[2], c[3]))
            .collect(),
        delta,
        provenance: branches.iter().zip(&weights).map(|(b, w)| (w / total, b.flipped)).collect(),
    })
}

fn unflipped(boxes: &Tensor, flipped: bool) -> Vec<BoxA> {
    boxes
        .data()
        .chunks(4)
        .map(|c| {
            let cx = if flipped { 1.0 - c[0] } else { c[0] };
            let b = BoxN::saturating(cx, c[1], c[2], c[3]);
            to_absolute(b, 1.0, 1.0).expect("unit frame")
        })
        .collect()
}

/// Reorders the slots of every branch after the first so that slot `i`
/// holds the query whose proposal overlaps the first branch's slot `i` the
/// most, under a one-to-one assignment.
pub fn align_slots(branches: &[QueryOutputs]) -> Result<Vec<QueryOutputs>> {
    let Some(first) = branches.first() else {
        return Ok(Vec::new());
    };
    let anchor = unflipped(&first.proposals, first.flipped);
    let n = anchor.len();
    let mut out = vec![first.clone()];
    for b in &branches[1..] {
        let own = unflipped(&b.proposals, b.flipped);
        if own.len() != n || b.hidden.rows() != n {
            return Err(Error::InvalidState(format!(
                "slot alignment expects {n} proposals per branch, got {}",
                own.len()
            )));
        }
        let cost = CostMatrix::from_fn(n, n, |i, j| 1.0 - iou(anchor[i], own[j]));
        let order: Vec<usize> = hungarian(&cost)?.into_iter().map(|(_, j)| j).collect();
        let take = |t: &Tensor| Tensor::new(t.shape().to_vec(), order.iter().flat_map(|&j| t.row(j).to_vec()).collect());
        out.push(QueryOutputs {
            hidden: take(&b.hidden),
            reference: take(&b.reference),
            delta: take(&b.delta),
            proposals: take(&b.proposals),
            flipped: b.flipped,
        });
    }
    Ok(out)
}

/// Runs fused queries through the class head and box refinement.
pub fn decode_fused(
    det: &Detector,
    store: &ParamStore,
    fused: &FusedQuerySet,
    image: &Image,
    top_k: usize,
) -> Result<DetectionSet> {
    let tape = Tape::new();
    let p = store.bind(&tape, false);
    let hidden = tape.constant(fused.hidden.clone());
    let anchors = Tensor::new(
        [fused.anchors.len(), 4],
        fused.anchors.iter().flat_map(|b| b.to_array()).collect(),
    );
    let pred = det.predict_from(&p, hidden, tape.constant(anchors), Some(tape.constant(fused.delta.clone())));
    Ok(top_pairs(
        &pred.logits.value(),
        &pred.box_list(),
        top_k,
        image.width() as f64,
        image.height() as f64,
    ))
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.category.cmp(&b.category))
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
        .then(a.bbox.x2.total_cmp(&b.bbox.x2))
        .then(a.bbox.y2.total_cmp(&b.bbox.y2))
}

/// Clusters detections across sets and averages each cluster.
///
/// Seeds are taken in descending score over all sets; each other set adds
/// its unclustered same-class detection with the highest IoU `>= tau` to the
/// seed. A cluster yields the score-weighted mean box and the mean score.
/// Output is sorted by score and cut to `top_k`.
pub fn fuse_predictions(sets: &[DetectionSet], tau: f64, top_k: usize) -> DetectionSet {
    let mut items: Vec<(usize, usize)> = sets
        .iter()
        .enumerate()
        .flat_map(|(s, set)| (0..set.len()).map(move |i| (s, i)))
        .collect();
    items.sort_by(|&(sa, ia), &(sb, ib)| detection_order(&sets[sa][ia], &sets[sb][ib]));
    let mut used: Vec<Vec<bool>> = sets.iter().map(|s| vec![false; s.len()]).collect();
    let mut out = Vec::new();
    for &(s, i) in &items {
        if used[s][i] {
            continue;
        }
        used[s][i] = true;
        let seed = sets[s][i];
        let mut members = vec![seed];
        for (t, set) in sets.iter().enumerate() {
            if t == s {
                continue;
            }
            let best = set
                .iter()
                .enumerate()
                .filter(|(j, d)| !used[t][*j] && d.category == seed.category)
                .map(|(j, d)| (j, iou(seed.bbox, d.bbox)))
                .filter(|&(_, o)| o >= tau)
                .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| detection_order(&set[b.0], &set[a.0])));
            if let Some((j, _)) = best {
                used[t][j] = true;
                members.push(set[j]);
            }
        }
        out.push(merge(&members));
    }
    out.sort_by(detection_order);
    out.truncate(top_k);
    out
}

fn merge(members: &[Detection]) -> Detection {
    if members.len() == 1 {
        return members[0];
    }
    let wsum: f64 = members.iter().map(|d| d.score).sum();
    let weight = |d: &Detection| {
        if wsum > 0.0 {
            d.score / wsum
        } else {
            1.0 / members.len() as f64
        }
    };
    let coord = |f: fn(&BoxA) -> f64| members.iter().map(|d| weight(d) * f(&d.bbox)).sum::<f64>();
    Detection {
        bbox: BoxA {
            x1: coord(|b| b.x1),
            y1: coord(|b| b.y1),
            x2: coord(|b| b.x2),
            y2: coord(|b| b.y2),
        },
        category: members[0].category,
        score: wsum / members.len() as f64,
    }
}

/// Multi-scale and flip TTA with query-feature and box-level fusion.
pub fn tta_predict(det: &Detector, store: &ParamStore, image: &Image, cfg: &TtaConfig) -> Result<DetectionSet> {
    cfg.validate()?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let branches = cfg.branches();
    let mut queries = Vec::with_capacity(branches.len());
    let mut sets = Vec::with_capacity(branches.len() + 1);
    for &(scale, flip, _) in &branches {
        let q = query_outputs(det, store, &prepare_image(image, det, scale, flip), flip)?;
        let single = fuse_query_features(std::slice::from_ref(&q), &[])?;
        sets.push(decode_fused(det, store, &single, image, cfg.top_k)?);
        queries.push(q);
    }
    let weights: Vec<f64> = branches.iter().map(|b| b.2).collect();
    if cfg.correspondence == SlotCorrespondence::ProposalIou {
        queries = align_slots(&queries)?;
    }
    let fused = fuse_query_features(&queries, &weights)?;
    sets.push(decode_fused(det, store, &fused, image, cfg.top_k)?);
    for set in &mut sets {
        set.retain(|d| d.score >= cfg.score_threshold);
    }
    let mut out = fuse_predictions(&sets, cfg.tau, cfg.top_k);
    for d in &mut out {
        d.bbox = d.bbox.clip(w, h);
    }
    Ok(out)
}

/// Maps model class indices to dataset category ids.
pub fn with_category_ids(image_id: u64, dets: DetectionSet, dataset: &Dataset) -> Result<ImagePredictions> {
    let detections = dets
        .into_iter()
        .map(|d| {
            if d.category >= dataset.num_classes() {
                return Err(Error::InvalidState(format!(
                    "model predicts class {} but the dataset has {} categories",
                    d.category,
                    dataset.num_classes()
                )));
            }
            Ok(Detection {
                category: dataset.category_id(d.category) as usize,
                ..d
            })
        })
        .collect::<Result<_>>()?;
    Ok(ImagePredictions { image_id, detections })
}

/// How [`evaluate_model`] produces detections.
#[derive(Clone, Debug, PartialEq)]
pub enum InferenceMode {
    /// One pass at the given longer-side size.
    Single {
        size: usize,
        top_k: usize,
    },
    Tta(TtaConfig),
}

/// Predictions for every image in `images` (paired with `dataset.images`).
pub fn predict_dataset(
    det: &Detector,
    store: &ParamStore,
    images: &[Image],
    dataset: &Dataset,
    mode: &InferenceMode,
) -> Result<Vec<ImagePredictions>> {
    if images.len() != dataset.images.len() {
        return Err(invalid_arg!(
            "{} images for {} dataset entries",
            images.len(),
            dataset.images.len()
        ));
    }
    if det.config.num_classes != dataset.num_classes() {
        return Err(invalid_config!(
            "model has {} classes but the dataset has {} categories",
            det.config.num_classes,
            dataset.num_classes()
        ));
    }
    images
        .iter()
        .zip(&dataset.images)
        .map(|(img, info)| {
            let dets = match mode {
                InferenceMode::Single { size, top_k } => predict(det, store, img, *size, *top_k)?,
                InferenceMode::Tta(cfg) => tta_predict(det, store, img, cfg)?,
            };
            with_category_ids(info.id, dets, dataset)
        })
        .collect()
}

/// COCO metrics of the model on a dataset.
pub fn evaluate_model(
    det: &Detector,
    store: &ParamStore,
    images: &[Image],
    dataset: &Dataset,
    mode: &InferenceMode,
) -> Result<EvalResult> {
    let preds = predict_dataset(det, store, images, dataset, mode)?;
    evaluate(&preds, dataset, &EvalConfig::default())
}
