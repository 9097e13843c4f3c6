//! Query sequence construction: the denoising segment followed by `K`
//! matching groups, and the self-attention mask that keeps every group and
//! every denoising group isolated.
//!
//! Layout of a training sequence:
//!
//! ```text
//! [ dn group 0 | dn group 1 | ... | match group 0 | ... | match group K-1 ]
//!   pos | neg    pos | neg
//! ```
//!
//! Mask convention: `blocked(i, j) == true` means query `i` may not attend
//! to query `j` (an additive `-inf` before the softmax).

use std::sync::Arc;

use gdetr_autograd::{SpanMask, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, invalid_config, Result};
use crate::geometry::BoxN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGroupConfig {
    /// Number of parallel matching groups `K`; group 0 is used at inference.
    pub groups: usize,
    /// Queries per group `N`.
    pub queries_per_group: usize,
}

impl Default for QueryGroupConfig {
    fn default() -> Self {
        Self {
            groups: 11,
            queries_per_group: 20,
        }
    }
}

impl QueryGroupConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.queries_per_group == 0 {
            return Err(invalid_config!(
                "query groups and queries per group must be >= 1, got {self:?}"
            ));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.groups * self.queries_per_group
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoisingConfig {
    /// Upper bound on denoising queries per image.
    pub total: usize,
    /// Requested denoising group count; derived from `total` when unset.
    pub groups: Option<usize>,
    /// Positive queries jitter each corner by less than this fraction of the half size.
    pub pos_noise: f64,
    /// Negative queries jitter by a fraction in `[pos_noise, neg_noise)`.
    pub neg_noise: f64,
    /// Probability of replacing a denoising label with a random category.
    pub label_flip: f64,
}

impl Default for DenoisingConfig {
    fn default() -> Self {
        Self {
            total: 100,
            groups: None,
            pos_noise: 0.4,
            neg_noise: 1.0,
            label_flip: 0.5,
        }
    }
}

impl DenoisingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neg_noise <= self.pos_noise {
            return Err(invalid_config!(
                "negative noise scale {} must exceed positive noise scale {}",
                self.neg_noise,
                self.pos_noise
            ));
        }
        if self.pos_noise < 0.0 || !(0.0..=1.0).contains(&self.label_flip) {
            return Err(invalid_config!("invalid denoising noise settings {self:?}"));
        }
        Ok(())
    }

    /// Group count and number of ground truths used for an image with `num_gt` objects.
    ///
    /// Groups shrink so `groups * 2 * used_gt <= total`; if even one group
    /// does not fit, only the first `total / 2` ground truths are noised.
    pub fn plan(&self, num_gt: usize) -> (usize, usize) {
        if num_gt == 0 || self.total < 2 {
            return (0, 0);
        }
        let fit = self.total / (2 * num_gt);
        if fit == 0 {
            return (1, self.total / 2);
        }
        let groups = self.groups.map_or(fit, |g| g.min(fit));
        (groups, num_gt)
    }
}

/// Denoising queries for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DnSegment {
    /// Possibly flipped category fed to the label embedding.
    pub labels: Vec<usize>,
    pub anchors: Vec<BoxN>,
    /// Fixed assignment: the ground-truth index for positives, `None` ("no object") for negatives.
    pub targets: Vec<Option<usize>>,
    pub positive: Vec<bool>,
    pub groups: usize,
    /// Queries per denoising group (`2 * used ground truths`).
    pub per_group: usize,
}

impl DnSegment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Builds positive/negative denoising pairs from ground truth.
///
/// Within each group the positives for every ground truth come first, then
/// the negatives in the same order.
pub fn make_denoising_queries(
    gt: &[(BoxN, usize)],
    cfg: &DenoisingConfig,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<DnSegment> {
    cfg.validate()?;
    let (groups, used) = cfg.plan(gt.len());
    if groups == 0 {
        return Ok(DnSegment::default());
    }
    let gt = &gt[..used];
    let per_group = 2 * used;
    let mut seg = DnSegment {
        groups,
        per_group,
        ..DnSegment::default()
    };
    for _ in 0..groups {
        for negative in [false, true] {
            for (t, &(b, label)) in gt.iter().enumerate() {
                let label = if num_classes > 0 && rng.random::<f64>() < cfg.label_flip {
                    rng.random_range(0..num_classes)
                } else {
                    label
                };
                let (lo, hi) = if negative {
                    (cfg.pos_noise, cfg.neg_noise)
                } else {
                    (0.0, cfg.pos_noise)
                };
                seg.labels.push(label);
                seg.anchors.push(jitter_box(b, lo, hi, rng));
                seg.targets.push((!negative).then_some(t));
                seg.positive.push(!negative);
            }
        }
    }
    Ok(seg)
}

/// Moves each corner by `sign * u * half_extent`, `u` uniform in `[lo, hi)`.
fn jitter_box(b: BoxN, lo: f64, hi: f64, rng: &mut impl Rng) -> BoxN {
    let half = [b.w / 2.0, b.h / 2.0, b.w / 2.0, b.h / 2.0];
    let mut c = b.corners();
    for (v, h) in c.iter_mut().zip(half) {
        let u = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        *v = (*v + sign * u * h).clamp(0.0, 1.0);
    }
    let (x1, x2) = (c[0].min(c[2]), c[0].max(c[2]));
    let (y1, y2) = (c[1].min(c[3]), c[1].max(c[3]));
    BoxN::saturating((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
}

/// Square self-attention mask over the whole query sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    /// `true` when query `i` may not attend to query `j`.
    pub fn blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size + j]
    }

    pub fn to_spans(&self) -> SpanMask {
        SpanMask::from_blocked(self.size, self.size, |i, j| self.blocked(i, j))
    }
}

/// Mask for `dn_groups * dn_per_group` denoising queries followed by `k` groups of `n`.
pub fn build_attention_mask(k: usize, n: usize, dn_groups: usize, dn_per_group: usize) -> AttentionMask {
    let dn_total = dn_groups * dn_per_group;
    let size = dn_total + k * n;
    // block id: every query attends exactly within its own block
    let block = |i: usize| {
        if i < dn_total {
            i / dn_per_group
        } else {
            dn_groups + (i - dn_total) / n
        }
    };
    let mut blocked = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            blocked[i * size + j] = block(i) != block(j);
        }
    }
    AttentionMask { size, blocked }
}

/// Where a query sits in the sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySlot {
    Denoising(usize),
    Matching { group: usize, slot: usize },
}

/// Segment boundaries of a query sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub dn_total: usize,
    pub groups: usize,
    pub per_group: usize,
}

impl Segments {
    pub fn total(&self) -> usize {
        self.dn_total + self.groups * self.per_group
    }

    pub fn group_range(&self, k: usize) -> std::ops::Range<usize> {
        let lo = self.dn_total + k * self.per_group;
        lo..lo + self.per_group
    }

    pub fn locate(&self, idx: usize) -> Option<QuerySlot> {
        if idx < self.dn_total {
            Some(QuerySlot::Denoising(idx))
        } else if idx < self.total() {
            let m = idx - self.dn_total;
            Some(QuerySlot::Matching {
                group: m / self.per_group,
                slot: m % self.per_group,
            })
        } else {
            None
        }
    }
}

/// The concatenated query sequence with its attention mask.
#[derive(Clone, Debug)]
pub struct QueryLayout<'t> {
    /// `[total, C]` content embeddings.
    pub content: Var<'t>,
    /// `[total, 4]` normalized reference boxes.
    pub anchors: Tensor,
    pub segments: Segments,
    pub mask: Arc<AttentionMask>,
    pub spans: Arc<SpanMask>,
}

/// Concatenates `[dn | groups 0..K-1]` and attaches the block mask.
///
/// `dn` pairs the denoising content rows with their segment description.
pub fn assemble_layout<'t>(
    matching_content: Var<'t>,
    matching_anchors: &[BoxN],
    dn: Option<(Var<'t>, &DnSegment)>,
    cfg: &QueryGroupConfig,
) -> Result<QueryLayout<'t>> {
    cfg.validate()?;
    let expect = cfg.total();
    if matching_content.rows() != expect || matching_anchors.len() != expect {
        return Err(invalid_arg!(
            "matching segment has {} embeddings and {} anchors, expected K*N = {expect}",
            matching_content.rows(),
            matching_anchors.len()
        ));
    }
    let tape = matching_content.tape();
    let (content, anchor_rows, dn_groups, dn_per_group) = match dn {
        Some((dn_content, seg)) if !seg.is_empty() => {
            if dn_content.rows() != seg.len() {
                return Err(invalid_arg!(
                    "denoising content has {} rows for {} queries",
                    dn_content.rows(),
                    seg.len()
                ));
            }
            let rows: Vec<BoxN> = seg.anchors.iter().chain(matching_anchors).copied().collect();
            (
                tape.concat_rows(&[dn_content, matching_content]),
                rows,
                seg.groups,
                seg.per_group,
            )
        }
        _ => (matching_content, matching_anchors.to_vec(), 0, 0),
    };
    let mask = build_attention_mask(cfg.groups, cfg.queries_per_group, dn_groups, dn_per_group);
    let spans = mask.to_spans();
    Ok(QueryLayout {
        content,
        anchors: anchors_tensor(&anchor_rows),
        segments: Segments {
            dn_total: dn_groups * dn_per_group,
            groups: cfg.groups,
            per_group: cfg.queries_per_group,
        },
        mask: Arc::new(mask),
        spans: Arc::new(spans),
    })
}

pub fn anchors_tensor(boxes: &[BoxN]) -> Tensor {
    Tensor::new([boxes.len(), 4], boxes.iter().flat_map(|b| b.to_array()).collect())
}

/// Group-0 matching queries only, as used at inference.
pub fn select_inference_slice<'t>(layout: &QueryLayout<'t>) -> QueryLayout<'t> {
    let r = layout.segments.group_range(0);
    let n = r.len();
    let anchors = Tensor::new([n, 4], layout.anchors.data()[r.start * 4..r.end * 4].to_vec());
    let mask = build_attention_mask(1, n, 0, 0);
    let spans = mask.to_spans();
    QueryLayout {
        content: layout.content.slice_rows(r.start, r.end),
        anchors,
        segments: Segments {
            dn_total: 0,
            groups: 1,
            per_group: n,
        },
        mask: Arc::new(mask),
        spans: Arc::new(spans),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gdetr_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn allowed_rows(m: &AttentionMask) -> Vec<Vec<usize>> {
        (0..m.size())
            .map(|i| (0..m.size()).filter(|&j| !m.blocked(i, j)).collect())
            .collect()
    }

    #[test]
    fn vanilla_mask_all_allowed() {
        let m = build_attention_mask(1, 3, 0, 0);
        assert_eq!(m.size(), 3);
        assert!(allowed_rows(&m).iter().all(|r| r == &[0, 1, 2]));
    }

    #[test]
    fn two_groups_block_diagonal() {
        let m = build_attention_mask(2, 2, 0, 0);
        assert_eq!(allowed_rows(&m), vec![vec![0, 1], vec![0, 1], vec![2, 3], vec![2, 3]]);
    }

    #[test]
    fn denoising_mask_enumerated_against_rules() {
        let (k, n, g, per) = (1, 2, 1, 4);
        let m = build_attention_mask(k, n, g, per);
        assert_eq!(m.size(), 6);
        let dn_total = g * per;
        for i in 0..6 {
            for j in 0..6 {
                let (i_dn, j_dn) = (i < dn_total, j < dn_total);
                let allowed = match (i_dn, j_dn) {
                    // (c) same dn group only
                    (true, true) => i / per == j / per,
                    // (b), (d) never across the dn/matching boundary
                    (true, false) | (false, true) => false,
                    // (a) same matching group only
                    (false, false) => (i - dn_total) / n == (j - dn_total) / n,
                };
                assert_eq!(!m.blocked(i, j), allowed, "({i}, {j})");
            }
        }
        let rows = allowed_rows(&m);
        assert!(rows[..4].iter().all(|r| r == &[0, 1, 2, 3]));
        assert!(rows[4..].iter().all(|r| r == &[4, 5]));
    }

    #[test]
    fn matching_block_is_block_diagonal() {
        let (k, n) = (3, 4);
        let m = build_attention_mask(k, n, 2, 6);
        for i in 12..m.size() {
            for j in 12..m.size() {
                assert_eq!(m.blocked(i, j), (i - 12) / n != (j - 12) / n);
            }
        }
    }

    fn gt3() -> Vec<(BoxN, usize)> {
        vec![
            (BoxN::new(0.3, 0.3, 0.2, 0.2).unwrap(), 0),
            (BoxN::new(0.6, 0.5, 0.3, 0.1).unwrap(), 1),
            (BoxN::new(0.8, 0.8, 0.1, 0.3).unwrap(), 2),
        ]
    }

    #[test]
    fn zero_noise_positives_equal_ground_truth() {
        let cfg = DenoisingConfig {
            pos_noise: 0.0,
            label_flip: 0.0,
            ..DenoisingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = make_denoising_queries(&gt3(), &cfg, 3, &mut rng).unwrap();
        for i in 0..seg.len() {
            if let Some(t) = seg.targets[i] {
                assert!(seg.positive[i]);
                let (b, l) = gt3()[t];
                for (x, y) in seg.anchors[i].to_array().iter().zip(b.to_array()) {
                    assert!((x - y).abs() < 1e-15);
                }
                assert_eq!(seg.labels[i], l);
            }
        }
    }

    #[test]
    fn empty_ground_truth_gives_empty_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seg = make_denoising_queries(&[], &DenoisingConfig::default(), 3, &mut rng).unwrap();
        assert!(seg.is_empty());
        let tape = Tape::new();
        let cfg = QueryGroupConfig {
            groups: 2,
            queries_per_group: 2,
        };
        let content = tape.constant(Tensor::zeros([4, 3]));
        let anchors = vec![BoxN::new(0.5, 0.5, 0.1, 0.1).unwrap(); 4];
        let dn_content = tape.constant(Tensor::zeros([0, 3]));
        let layout = assemble_layout(content, &anchors, Some((dn_content, &seg)), &cfg).unwrap();
        assert_eq!(*layout.mask, build_attention_mask(2, 2, 0, 0));
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = DenoisingConfig {
            groups: Some(2),
            ..DenoisingConfig::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            make_denoising_queries(&gt3(), &cfg, 3, &mut rng).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 12);
        assert_eq!((a.groups, a.per_group), (2, 6));
        let b = run();
        assert_eq!(a, b);
        for g in 0..a.groups {
            let pos = a.positive[g * 6..(g + 1) * 6].iter().filter(|&&p| p).count();
            assert_eq!(pos, 3);
        }
    }

    #[test]
    fn negatives_are_further_than_positives() {
        let cfg = DenoisingConfig {
            label_flip: 0.0,
            ..DenoisingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = vec![(BoxN::new(0.5, 0.5, 0.4, 0.4).unwrap(), 0)];
        let seg = make_denoising_queries(&gt, &cfg, 3, &mut rng).unwrap();
        assert_eq!(seg.groups, 50);
        let dev = |b: BoxN| {
            b.corners()
                .iter()
                .zip(gt[0].0.corners())
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max)
        };
        for i in 0..seg.len() {
            let d = dev(seg.anchors[i]);
            if seg.positive[i] {
                assert!(d < 0.4 * 0.2 + 1e-12);
            } else {
                assert_eq!(seg.targets[i], None);
            }
        }
    }

    #[test]
    fn noise_order_is_validated() {
        let cfg = DenoisingConfig {
            pos_noise: 1.0,
            neg_noise: 1.0,
            ..DenoisingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_denoising_queries(&gt3(), &cfg, 3, &mut rng).is_err());
    }

    #[test]
    fn plan_caps_total() {
        let cfg = DenoisingConfig::default();
        assert_eq!(cfg.plan(3), (16, 3));
        assert_eq!(cfg.plan(5), (10, 5));
        assert_eq!(cfg.plan(0), (0, 0));
        assert_eq!(cfg.plan(80), (1, 50));
        let capped = DenoisingConfig { groups: Some(4), ..cfg };
        assert_eq!(capped.plan(20), (2, 20));
    }

    #[test]
    fn layout_lengths_and_lookup() {
        let tape = Tape::new();
        let cfg = QueryGroupConfig {
            groups: 3,
            queries_per_group: 4,
        };
        let anchors = vec![BoxN::new(0.5, 0.5, 0.2, 0.2).unwrap(); 12];
        let content = tape.constant(Tensor::from_fn([12, 2], |i| i as f64));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dn_cfg = DenoisingConfig {
            groups: Some(2),
            ..DenoisingConfig::default()
        };
        let seg = make_denoising_queries(&gt3(), &dn_cfg, 3, &mut rng).unwrap();
        let dn_content = tape.constant(Tensor::zeros([seg.len(), 2]));
        let layout = assemble_layout(content, &anchors, Some((dn_content, &seg)), &cfg).unwrap();
        let s = layout.segments;
        assert_eq!(s.total(), 12 + 12);
        assert_eq!(layout.content.rows(), 24);
        for k in 0..3 {
            for j in 0..4 {
                assert_eq!(s.locate(12 + k * 4 + j), Some(QuerySlot::Matching { group: k, slot: j }));
            }
        }
        assert_eq!(s.locate(5), Some(QuerySlot::Denoising(5)));
        assert_eq!(s.locate(24), None);

        let inf = select_inference_slice(&layout);
        assert_eq!(inf.content.rows(), 4);
        assert_eq!(inf.content.value().data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn layout_without_dn_is_plain_query_set() {
        let tape = Tape::new();
        let cfg = QueryGroupConfig {
            groups: 1,
            queries_per_group: 3,
        };
        let anchors = vec![BoxN::new(0.5, 0.5, 0.2, 0.2).unwrap(); 3];
        let content = tape.constant(Tensor::ones([3, 2]));
        let layout = assemble_layout(content, &anchors, None, &cfg).unwrap();
        assert_eq!(layout.content.id(), content.id());
        assert_eq!(*layout.mask, build_attention_mask(1, 3, 0, 0));
        assert!(assemble_layout(content, &anchors[..2], None, &cfg).is_err());
    }
}
