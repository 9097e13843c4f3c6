//! Bipartite matching between queries and ground truth, and the training loss.

use gdetr_autograd::{sigmoid, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decoder::LayerPrediction;
use crate::error::{invalid_arg, invalid_config, Result};
use crate::geometry::{giou_normalized, BoxN};
use crate::query_engine::{DnSegment, Segments};

/// Dense `[rows, cols]` cost matrix in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid_arg!(
                "{rows}x{cols} cost matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols.max(1), k % cols.max(1))).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sum of the entries picked by `pairs`.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Minimum-cost assignment of `min(rows, cols)` pairs `(row, col)`, sorted by row.
///
/// Among optimal assignments the result is deterministic: walking the
/// smaller side in ascending order, each index takes the smallest partner
/// that still admits an optimal completion.
pub fn hungarian(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    if let Some(k) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(invalid_arg!(
            "non-finite cost {} at ({}, {})",
            cost.data[k],
            k / cost.cols,
            k % cost.cols
        ));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Vec::new());
    }
    let transpose = cost.rows > cost.cols;
    let (r, n) = if transpose {
        (cost.cols, cost.rows)
    } else {
        (cost.rows, cost.cols)
    };
    // square matrix: r real rows, n - r zero-cost padding rows
    let mut a = vec![0.0; n * n];
    for i in 0..r {
        for j in 0..n {
            a[i * n + j] = if transpose { cost.get(j, i) } else { cost.get(i, j) };
        }
    }
    let (u, v, row_of_col) = solve_square(&a, n);
    let scale = 1.0 + a.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight: Vec<bool> = (0..n * n).map(|k| (a[k] - u[k / n] - v[k % n]).abs() <= tol).collect();

    let mut col_of_row = vec![usize::MAX; n];
    let mut used = vec![false; n];
    let mut ok = true;
    for i in 0..r {
        let pick = (0..n).find(|&j| {
            if !tight[i * n + j] || used[j] {
                return false;
            }
            used[j] = true;
            let feasible = has_perfect_matching(&tight, n, i + 1, &used);
            used[j] = false;
            feasible
        });
        match pick {
            Some(j) => {
                used[j] = true;
                col_of_row[i] = j;
            }
            None => {
                ok = false;
                break;
            }
        }
    }
    if !ok {
        // rounding left the tight graph without a completion; use the solver's own optimum
        for (j, &i) in row_of_col.iter().enumerate() {
            col_of_row[i] = j;
        }
    }
    let mut pairs: Vec<(usize, usize)> = (0..r)
        .map(|i| if transpose { (col_of_row[i], i) } else { (i, col_of_row[i]) })
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Shortest-augmenting-path assignment on an `n x n` matrix.
///
/// Returns row duals, column duals and the row assigned to each column.
fn solve_square(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based with a virtual column 0, as in the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (u[1..].to_vec(), v[1..].to_vec(), row_of_col)
}

/// Whether rows `from..n` can be matched into the unused columns of `edges`.
fn has_perfect_matching(edges: &[bool], n: usize, from: usize, used: &[bool]) -> bool {
    fn augment(i: usize, edges: &[bool], n: usize, used: &[bool], seen: &mut [bool], owner: &mut [usize]) -> bool {
        for j in 0..n {
            if used[j] || seen[j] || !edges[i * n + j] {
                continue;
            }
            seen[j] = true;
            if owner[j] == usize::MAX || augment(owner[j], edges, n, used, seen, owner) {
                owner[j] = i;
                return true;
            }
        }
        false
    }
    let mut owner = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    (from..n).all(|i| {
        seen.fill(false);
        augment(i, edges, n, used, &mut seen, &mut owner)
    })
}

/// Weights and focal parameters shared by the matcher and the loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.class, self.l1, self.giou, self.alpha, self.gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) || self.alpha > 1.0 {
            return Err(invalid_config!("invalid loss weights {self:?}"));
        }
        Ok(())
    }
}

/// Ground truth of one image in normalized coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Target {
    pub boxes: Vec<BoxN>,
    pub labels: Vec<usize>,
}

impl Target {
    pub fn new(boxes: Vec<BoxN>, labels: Vec<usize>) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(invalid_arg!("{} boxes but {} labels", boxes.len(), labels.len()));
        }
        Ok(Self { boxes, labels })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn pairs(&self) -> Vec<(BoxN, usize)> {
        self.boxes.iter().copied().zip(self.labels.iter().copied()).collect()
    }
}

/// Classification part of the matching cost: positive focal cost minus negative focal cost.
pub fn focal_cost(logit: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(logit);
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p + 1e-8).ln();
    let pos = alpha * (1.0 - p).powf(gamma) * -(p + 1e-8).ln();
    pos - neg
}

/// `[queries, gt]` matching cost for a slice of predictions.
///
/// `logits` is `[queries, classes]`; boxes are compared in normalized form.
pub fn matching_cost(logits: &Tensor, boxes: &[BoxN], gt: &Target, w: &CostWeights) -> CostMatrix {
    let q = boxes.len();
    CostMatrix::from_fn(q, gt.len(), |i, t| {
        let cls = focal_cost(logits.row(i)[gt.labels[t]], w.alpha, w.gamma);
        let (a, b) = (boxes[i].to_array(), gt.boxes[t].to_array());
        let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        w.class * cls + w.l1 * l1 - w.giou * giou_normalized(boxes[i], gt.boxes[t])
    })
}

/// One-to-one matches per group, as `(query index within the group, gt index)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub groups: Vec<Vec<(usize, usize)>>,
}

impl MatchResult {
    pub fn total_pairs(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    /// Matches as `(sequence index, gt index)` for a layout.
    pub fn global_pairs(&self, segments: &Segments) -> Vec<(usize, usize)> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(k, pairs)| {
                let lo = segments.group_range(k).start;
                pairs.iter().map(move |&(q, t)| (lo + q, t))
            })
            .collect()
    }

    /// Number of queries matched to each ground truth.
    pub fn per_gt_counts(&self, num_gt: usize) -> Vec<usize> {
        let mut counts = vec![0; num_gt];
        for &(_, t) in self.groups.iter().flatten() {
            counts[t] += 1;
        }
        counts
    }
}

/// Runs an independent assignment for every matching group of a prediction.
pub fn match_all_groups(pred: &LayerPrediction<'_>, segments: &Segments, gt: &Target, w: &CostWeights) -> Result<MatchResult> {
    if pred.len() != segments.total() {
        return Err(invalid_arg!(
            "prediction has {} queries, layout has {}",
            pred.len(),
            segments.total()
        ));
    }
    let logits = pred.logits.value();
    let boxes = pred.box_list();
    let classes = logits.cols();
    let mut groups = Vec::with_capacity(segments.groups);
    for k in 0..segments.groups {
        let r = segments.group_range(k);
        if gt.is_empty() {
            groups.push(Vec::new());
            continue;
        }
        let slice = Tensor::new([r.len(), classes], logits.data()[r.start * classes..r.end * classes].to_vec());
        groups.push(hungarian(&matching_cost(&slice, &boxes[r], gt, w))?);
    }
    Ok(MatchResult { groups })
}

/// Loss components, each already multiplied by its weight, summed over layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub dn_cls: f64,
    pub dn_l1: f64,
    pub dn_giou: f64,
    pub enc_cls: f64,
    pub enc_l1: f64,
    pub enc_giou: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.cls + self.l1 + self.giou + self.dn_cls + self.dn_l1 + self.dn_giou + self.enc_cls + self.enc_l1 + self.enc_giou
    }
}

/// Everything the loss reads from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a, 't> {
    /// One prediction per decoder layer, all on the same layout.
    pub layers: &'a [LayerPrediction<'t>],
    /// Predictions on all selected encoder proposals, matched one-to-one as a single set.
    pub encoder: Option<&'a LayerPrediction<'t>>,
    pub segments: Segments,
    pub dn: &'a DnSegment,
    pub gt: &'a Target,
}

/// Matches for every decoder layer and for the encoder proposals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Matches {
    pub layers: Vec<MatchResult>,
    pub encoder: Option<MatchResult>,
}

impl Matches {
    pub fn final_layer(&self) -> Option<&MatchResult> {
        self.layers.last()
    }
}

/// Proposals are ranked once for all groups and group 0 takes the best `N`
/// at inference, so they are supervised as one set: one positive per object.
fn encoder_segments(pred: &LayerPrediction<'_>) -> Segments {
    Segments {
        dn_total: 0,
        groups: 1,
        per_group: pred.len(),
    }
}

/// Re-matches every layer (and the encoder proposals) independently.
pub fn compute_matches(inputs: &LossInputs<'_, '_>, w: &CostWeights) -> Result<Matches> {
    let layers = inputs
        .layers
        .iter()
        .map(|p| match_all_groups(p, &inputs.segments, inputs.gt, w))
        .collect::<Result<_>>()?;
    let encoder = inputs
        .encoder
        .map(|p| match_all_groups(p, &encoder_segments(p), inputs.gt, w))
        .transpose()?;
    Ok(Matches { layers, encoder })
}

/// Summed `1 - giou` between predicted boxes `[M, 4]` and constant targets.
pub fn giou_loss<'t>(pred: Var<'t>, target: &Tensor) -> Var<'t> {
    let tape = pred.tape();
    let corners = |v: Var<'t>| {
        let (cx, cy) = (v.slice_cols(0, 1), v.slice_cols(1, 2));
        let (hw, hh) = (v.slice_cols(2, 3).scale(0.5), v.slice_cols(3, 4).scale(0.5));
        (cx.sub(hw), cy.sub(hh), cx.add(hw), cy.add(hh))
    };
    let (ax1, ay1, ax2, ay2) = corners(pred);
    let (bx1, by1, bx2, by2) = corners(tape.constant(target.clone()));
    let area = |x1: Var<'t>, y1: Var<'t>, x2: Var<'t>, y2: Var<'t>| x2.sub(x1).mul(y2.sub(y1));
    let iw = ax2.minimum(bx2).sub(ax1.maximum(bx1)).relu();
    let ih = ay2.minimum(by2).sub(ay1.maximum(by1)).relu();
    let inter = iw.mul(ih);
    let union = area(ax1, ay1, ax2, ay2).add(area(bx1, by1, bx2, by2)).sub(inter);
    let enclose = area(ax1.minimum(bx1), ay1.minimum(by1), ax2.maximum(bx2), ay2.maximum(by2));
    let giou = inter.div(union).sub(enclose.sub(union).div(enclose));
    giou.neg().add_scalar(1.0).sum()
}

/// Weighted focal/L1/GIoU terms of one prediction set against fixed pairs.
struct SetTerms<'t> {
    cls: Var<'t>,
    l1: Option<Var<'t>>,
    giou: Option<Var<'t>>,
}

fn set_terms<'t>(
    logits: Var<'t>,
    boxes: Var<'t>,
    pairs: &[(usize, usize)],
    labels: &[usize],
    gt: &Target,
    norm: f64,
    w: &CostWeights,
) -> SetTerms<'t> {
    let (q, classes) = (logits.rows(), logits.cols());
    let mut onehot = Tensor::zeros([q, classes]);
    for &(i, t) in pairs {
        onehot.data_mut()[i * classes + labels[t]] = 1.0;
    }
    let cls = logits.sigmoid_focal_loss(&onehot, w.alpha, w.gamma).scale(w.class / norm);
    if pairs.is_empty() {
        return SetTerms {
            cls,
            l1: None,
            giou: None,
        };
    }
    let idx: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let target = Tensor::new(
        [pairs.len(), 4],
        pairs.iter().flat_map(|p| gt.boxes[p.1].to_array()).collect(),
    );
    let matched = boxes.gather_rows(&idx);
    let l1 = matched
        .sub(boxes.tape().constant(target.clone()))
        .abs()
        .sum()
        .scale(w.l1 / norm);
    let giou = giou_loss(matched, &target).scale(w.giou / norm);
    SetTerms {
        cls,
        l1: Some(l1),
        giou: Some(giou),
    }
}

/// Total training loss and its breakdown for fixed matches.
///
/// Matching terms are normalized by `num_gt * groups`, denoising terms by
/// `num_gt * dn_groups` and proposal terms by `num_gt`, so each part
/// contributes on the scale of a single DETR loss.
pub fn total_loss<'t>(inputs: &LossInputs<'_, 't>, matches: &Matches, w: &CostWeights) -> Result<(Var<'t>, LossBreakdown)> {
    let first = inputs
        .layers
        .first()
        .ok_or_else(|| invalid_arg!("loss needs at least one layer prediction"))?;
    if matches.layers.len() != inputs.layers.len() {
        return Err(invalid_arg!(
            "{} layer matches for {} layers",
            matches.layers.len(),
            inputs.layers.len()
        ));
    }
    let tape = first.logits.tape();
    let s = inputs.segments;
    let num_gt = inputs.gt.len().max(1) as f64;
    let norm = num_gt * s.groups as f64;
    let mut parts: Vec<Var<'t>> = Vec::new();
    let mut bd = LossBreakdown::default();
    let push = |v: Var<'t>, slot: &mut f64, parts: &mut Vec<Var<'t>>| {
        *slot += v.item();
        parts.push(v);
    };

    let dn_pairs: Vec<(usize, usize)> = inputs
        .dn
        .targets
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|t| (i, t)))
        .collect();
    let dn_norm = num_gt * inputs.dn.groups.max(1) as f64;

    for (pred, m) in inputs.layers.iter().zip(&matches.layers) {
        let lo = s.dn_total;
        let hi = s.total();
        let pairs: Vec<(usize, usize)> = m.global_pairs(&s).into_iter().map(|(i, t)| (i - lo, t)).collect();
        let t = set_terms(
            pred.logits.slice_rows(lo, hi),
            pred.boxes.slice_rows(lo, hi),
            &pairs,
            &inputs.gt.labels,
            inputs.gt,
            norm,
            w,
        );
        push(t.cls, &mut bd.cls, &mut parts);
        if let (Some(l1), Some(g)) = (t.l1, t.giou) {
            push(l1, &mut bd.l1, &mut parts);
            push(g, &mut bd.giou, &mut parts);
        }
        if s.dn_total > 0 {
            let t = set_terms(
                pred.logits.slice_rows(0, s.dn_total),
                pred.boxes.slice_rows(0, s.dn_total),
                &dn_pairs,
                &inputs.gt.labels,
                inputs.gt,
                dn_norm,
                w,
            );
            push(t.cls, &mut bd.dn_cls, &mut parts);
            if let (Some(l1), Some(g)) = (t.l1, t.giou) {
                push(l1, &mut bd.dn_l1, &mut parts);
                push(g, &mut bd.dn_giou, &mut parts);
            }
        }
    }

    if let (Some(pred), Some(m)) = (inputs.encoder, &matches.encoder) {
        let es = encoder_segments(pred);
        let pairs = m.global_pairs(&es);
        let t = set_terms(pred.logits, pred.boxes, &pairs, &inputs.gt.labels, inputs.gt, num_gt, w);
        push(t.cls, &mut bd.enc_cls, &mut parts);
        if let (Some(l1), Some(g)) = (t.l1, t.giou) {
            push(l1, &mut bd.enc_l1, &mut parts);
            push(g, &mut bd.enc_giou, &mut parts);
        }
    }

    let total = parts
        .into_iter()
        .reduce(|a, b| a.add(b))
        .unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)));
    Ok((total, bd))
}
