//! Transformer decoder with masked self-attention, deformable
//! cross-attention, iterative box refinement and two-stage proposals.

mod deform;

use std::f64::consts::PI;
use std::sync::Arc;

use gdetr_autograd::{inverse_sigmoid, sigmoid, SpanMask, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use deform::{bilinear_sample, deform_attn, level_shapes, DeformLayout, LevelShape};

use crate::backbone::FeaturePyramid;
use crate::error::{invalid_config, Result};
use crate::geometry::BoxN;
use crate::nn::{Binding, LayerNorm, Linear, Mlp, ParamStore};
use crate::query_engine::QueryLayout;

/// Clamp applied to boxes before the inverse sigmoid.
pub const REFINE_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub channels: usize,
    pub layers: usize,
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 192,
            layers: 6,
            heads: 4,
            points: 4,
            levels: 4,
            ffn_dim: 768,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(invalid_config!(
                "decoder channels {} must be a positive multiple of heads {}",
                self.channels,
                self.heads
            ));
        }
        if !self.channels.is_multiple_of(2) {
            return Err(invalid_config!("decoder channels must be even, got {}", self.channels));
        }
        if self.points == 0 || self.levels == 0 || self.ffn_dim == 0 {
            return Err(invalid_config!("decoder points, levels and ffn_dim must be >= 1"));
        }
        Ok(())
    }

    fn deform_layout(&self) -> DeformLayout {
        DeformLayout {
            heads: self.heads,
            levels: self.levels,
            points: self.points,
        }
    }
}

/// Flattened multi-level memory the decoder attends to.
#[derive(Clone, Debug)]
pub struct Memory<'t> {
    /// `[cells, C]`, levels stacked in order.
    pub features: Var<'t>,
    pub shapes: Arc<Vec<LevelShape>>,
    pub valid_ratio: (f64, f64),
}

impl<'t> Memory<'t> {
    pub fn from_pyramid(pyramid: &FeaturePyramid<'t>) -> Self {
        let tape = pyramid.levels[0].map.tape();
        let maps: Vec<_> = pyramid.levels.iter().map(|l| l.map).collect();
        let dims: Vec<_> = pyramid.levels.iter().map(|l| (l.height, l.width)).collect();
        Self {
            features: tape.concat_rows(&maps),
            shapes: Arc::new(level_shapes(&dims)),
            valid_ratio: pyramid.valid_ratio,
        }
    }

    pub fn cells(&self) -> usize {
        self.features.rows()
    }
}

/// Class logits and boxes for every query after one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction<'t> {
    /// `[Q, classes]`.
    pub logits: Var<'t>,
    /// `[Q, 4]` normalized `(cx, cy, w, h)`.
    pub boxes: Var<'t>,
    /// Normalized query features the heads read, `[Q, C]`.
    pub hidden: Var<'t>,
    /// Boxes that `boxes` refine.
    pub reference: Var<'t>,
}

impl LayerPrediction<'_> {
    pub fn len(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn box_list(&self) -> Vec<BoxN> {
        self.boxes
            .value()
            .data()
            .chunks(4)
            .map(|c| BoxN::saturating(c[0], c[1], c[2], c[3]))
            .collect()
    }
}

/// `sigmoid(inverse_sigmoid(anchor) + delta)` on plain numbers.
pub fn refine_box(anchor: BoxN, delta: [f64; 4]) -> BoxN {
    let a = anchor.to_array();
    let r: [f64; 4] = std::array::from_fn(|i| sigmoid(inverse_sigmoid(a[i], REFINE_EPS) + delta[i]));
    BoxN::saturating(r[0], r[1], r[2], r[3])
}

/// Differentiable refinement through both the anchor and the delta.
pub fn refine<'t>(anchor: Var<'t>, delta: Var<'t>) -> Var<'t> {
    delta.add(anchor.inverse_sigmoid(REFINE_EPS)).sigmoid()
}

/// Sinusoidal embedding of `[Q, 4]` boxes into `[Q, 2 * channels]`.
pub fn box_sine_embedding(boxes: &Tensor, channels: usize) -> Tensor {
    let per = channels / 2;
    let freqs: Vec<f64> = (0..per)
        .map(|i| 2.0 * PI / 10000f64.powf((2 * (i / 2)) as f64 / per as f64))
        .collect();
    let q = boxes.rows();
    let mut out = Vec::with_capacity(q * 4 * per);
    for r in 0..q {
        let b = boxes.row(r);
        // DETR ordering: y, x, w, h
        for &v in &[b[1], b[0], b[2], b[3]] {
            for (i, f) in freqs.iter().enumerate() {
                let a = v * f;
                out.push(if i % 2 == 0 { a.sin() } else { a.cos() });
            }
        }
    }
    Tensor::new([q, 4 * per], out)
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    sa_q: Linear,
    sa_k: Linear,
    sa_v: Linear,
    sa_out: Linear,
    sa_norm: LayerNorm,
    value_proj: Linear,
    offsets: Linear,
    weights: Linear,
    ca_out: Linear,
    ca_norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ffn_norm: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.channels;
        let layout = cfg.deform_layout();
        let offsets = Linear::zeros(store, &format!("{name}.cross.offsets"), c, layout.slots() * 2);
        // spread initial sampling points radially, one direction per head
        let bias = store.get_mut(offsets.bias.expect("bias"));
        for h in 0..cfg.heads {
            let theta = 2.0 * PI * h as f64 / cfg.heads as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let norm = dx.abs().max(dy.abs());
            for l in 0..cfg.levels {
                for p in 0..cfg.points {
                    let s = layout.slot(h, l, p);
                    bias.data_mut()[2 * s] = dx / norm * (p + 1) as f64;
                    bias.data_mut()[2 * s + 1] = dy / norm * (p + 1) as f64;
                }
            }
        }
        Self {
            sa_q: Linear::new(store, &format!("{name}.self.q"), c, c, rng),
            sa_k: Linear::new(store, &format!("{name}.self.k"), c, c, rng),
            sa_v: Linear::new(store, &format!("{name}.self.v"), c, c, rng),
            sa_out: Linear::new(store, &format!("{name}.self.out"), c, c, rng),
            sa_norm: LayerNorm::new(store, &format!("{name}.self.norm"), c),
            value_proj: Linear::new(store, &format!("{name}.cross.value"), c, c, rng),
            offsets,
            weights: Linear::zeros(store, &format!("{name}.cross.weights"), c, layout.slots()),
            ca_out: Linear::new(store, &format!("{name}.cross.out"), c, c, rng),
            ca_norm: LayerNorm::new(store, &format!("{name}.cross.norm"), c),
            fc1: Linear::new(store, &format!("{name}.ffn.fc1"), c, cfg.ffn_dim, rng),
            fc2: Linear::new(store, &format!("{name}.ffn.fc2"), cfg.ffn_dim, c, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn.norm"), c),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<'t>(
        &self,
        p: &Binding<'t>,
        cfg: &DecoderConfig,
        tgt: Var<'t>,
        pos: Var<'t>,
        refs: Arc<Tensor>,
        memory: &Memory<'t>,
        mask: &Arc<SpanMask>,
    ) -> Var<'t> {
        let qk = tgt.add(pos);
        let sa = self.sa_q.forward(p, qk).attention(
            self.sa_k.forward(p, qk),
            self.sa_v.forward(p, tgt),
            cfg.heads,
            Some(mask.clone()),
        );
        let tgt = self.sa_norm.forward(p, tgt.add(self.sa_out.forward(p, sa)));

        let query = tgt.add(pos);
        let layout = cfg.deform_layout();
        let q = tgt.rows();
        let weights = self
            .weights
            .forward(p, query)
            .reshape([q * cfg.heads, cfg.levels * cfg.points])
            .softmax_rows()
            .reshape([q, layout.slots()]);
        let value = self.value_proj.forward(p, memory.features);
        let ca = deform_attn(
            value,
            memory.shapes.clone(),
            refs,
            self.offsets.forward(p, query),
            weights,
            layout,
        );
        let tgt = self.ca_norm.forward(p, tgt.add(self.ca_out.forward(p, ca)));

        let ffn = self.fc2.forward(p, self.fc1.forward(p, tgt).relu());
        self.ffn_norm.forward(p, tgt.add(ffn))
    }
}

/// Decoder stack with heads shared across layers.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub num_classes: usize,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    query_pos: Mlp,
    class_head: Linear,
    bbox_head: Mlp,
}

/// Bias that makes the initial foreground probability 0.01.
pub fn prior_bias() -> f64 {
    -((1.0 - 0.01) / 0.01f64).ln()
}

pub(crate) fn init_class_head(store: &mut ParamStore, head: &Linear) {
    let b = store.get_mut(head.bias.expect("bias"));
    b.data_mut().fill(prior_bias());
}

pub(crate) fn zero_last(store: &mut ParamStore, mlp: &Mlp) {
    let last = mlp.last();
    store.get_mut(last.weight).data_mut().fill(0.0);
    store.get_mut(last.bias.expect("bias")).data_mut().fill(0.0);
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: DecoderConfig,
        num_classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let layers = (0..config.layers)
            .map(|i| DecoderLayer::new(store, &format!("{prefix}.layers.{i}"), &config, rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), c);
        let query_pos = Mlp::new(store, &format!("{prefix}.query_pos"), &[2 * c, c, c], rng);
        let class_head = Linear::new(store, &format!("{prefix}.class_head"), c, num_classes, rng);
        init_class_head(store, &class_head);
        let bbox_head = Mlp::new(store, &format!("{prefix}.bbox_head"), &[c, c, c, 4], rng);
        zero_last(store, &bbox_head);
        Ok(Self {
            config,
            num_classes,
            layers,
            norm,
            query_pos,
            class_head,
            bbox_head,
        })
    }

    /// Class logits from normalized query features.
    pub fn classify<'t>(&self, p: &Binding<'t>, hidden: Var<'t>) -> Var<'t> {
        self.class_head.forward(p, hidden)
    }

    /// Box delta (in inverse-sigmoid space) from normalized query features.
    pub fn box_delta<'t>(&self, p: &Binding<'t>, hidden: Var<'t>) -> Var<'t> {
        self.bbox_head.forward(p, hidden)
    }

    fn heads<'t>(&self, p: &Binding<'t>, tgt: Var<'t>, reference: Var<'t>) -> LayerPrediction<'t> {
        let hidden = self.norm.forward(p, tgt);
        LayerPrediction {
            logits: self.classify(p, hidden),
            boxes: refine(reference, self.box_delta(p, hidden)),
            hidden,
            reference,
        }
    }

    /// Runs every layer and returns one prediction per layer.
    ///
    /// Inside a layer the reference boxes are constants; the box reported
    /// by layer `i` refines the undetached box of layer `i - 1`, so its loss
    /// also reaches the previous layer's box head. A decoder without layers
    /// returns the heads applied to the initial queries.
    pub fn decode<'t>(&self, p: &Binding<'t>, layout: &QueryLayout<'t>, memory: &Memory<'t>) -> Vec<LayerPrediction<'t>> {
        let tape = p.tape();
        let mut reference = tape.constant(layout.anchors.clone());
        let mut tgt = layout.content;
        if self.layers.is_empty() {
            return vec![self.heads(p, tgt, reference)];
        }
        let (vx, vy) = memory.valid_ratio;
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let detached = reference.value();
            let pos = self
                .query_pos
                .forward(p, tape.constant(box_sine_embedding(&detached, self.config.channels)));
            let scaled = Arc::new(Tensor::from_fn(detached.shape().to_vec(), |i| {
                detached.data()[i] * if i % 2 == 0 { vx } else { vy }
            }));
            tgt = layer.forward(p, &self.config, tgt, pos, scaled, memory, &layout.spans);
            let pred = self.heads(p, tgt, reference);
            reference = pred.boxes;
            out.push(pred);
        }
        out
    }
}

/// Encoder-side proposal head for two-stage query selection.
#[derive(Clone, Debug)]
pub struct TwoStage {
    enc_output: Linear,
    enc_norm: LayerNorm,
    class_head: Linear,
    bbox_head: Mlp,
}

/// Top-scoring pyramid cells turned into reference boxes.
#[derive(Clone, Debug)]
pub struct Proposals<'t> {
    /// Selected flat cell indices, best first.
    pub cells: Vec<usize>,
    /// Detached anchors for the decoder.
    pub anchors: Vec<BoxN>,
    /// Predictions on the selected cells, supervised by the encoder loss.
    pub prediction: LayerPrediction<'t>,
}

impl TwoStage {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        let class_head = Linear::new(store, &format!("{prefix}.class_head"), channels, num_classes, rng);
        init_class_head(store, &class_head);
        let bbox_head = Mlp::new(store, &format!("{prefix}.bbox_head"), &[channels, channels, channels, 4], rng);
        zero_last(store, &bbox_head);
        Self {
            enc_output: Linear::new(store, &format!("{prefix}.output"), channels, channels, rng),
            enc_norm: LayerNorm::new(store, &format!("{prefix}.norm"), channels),
            class_head,
            bbox_head,
        }
    }

    /// Scores every cell and keeps the best `total` valid ones.
    ///
    /// Ties keep ascending flat cell order.
    pub fn select<'t>(&self, p: &Binding<'t>, memory: &Memory<'t>, total: usize) -> Result<Proposals<'t>> {
        let tape = p.tape();
        let grid = proposal_grid(&memory.shapes, memory.valid_ratio);
        let valid: Vec<usize> = (0..grid.len()).filter(|&i| grid[i].is_some()).collect();
        if total > valid.len() {
            return Err(invalid_config!(
                "cannot select {total} proposals from {} valid pyramid cells",
                valid.len()
            ));
        }
        let hidden = self.enc_norm.forward(p, self.enc_output.forward(p, memory.features));
        let logits = self.class_head.forward(p, hidden);
        let lv = logits.value();
        let score = |i: usize| lv.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut order = valid;
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        order.truncate(total);

        let props: Vec<f64> = order
            .iter()
            .flat_map(|&i| grid[i].expect("valid cell").map(|v| inverse_sigmoid(v, 0.0)))
            .collect();
        let sel_hidden = hidden.gather_rows(&order);
        let delta = self.bbox_head.forward(p, sel_hidden);
        let unsig = tape.constant(Tensor::new([order.len(), 4], props));
        let boxes = delta.add(unsig).sigmoid();
        let anchors = boxes
            .value()
            .data()
            .chunks(4)
            .map(|c| BoxN::saturating(c[0], c[1], c[2], c[3]))
            .collect();
        Ok(Proposals {
            anchors,
            prediction: LayerPrediction {
                logits: logits.gather_rows(&order),
                boxes,
                hidden: sel_hidden,
                reference: unsig.sigmoid(),
            },
            cells: order,
        })
    }
}

/// Default proposal box per cell: the cell center with a level-dependent
/// size, in coordinates relative to the valid image area. Cells whose
/// proposal is not strictly inside `(0.01, 0.99)` are unusable.
pub fn proposal_grid(shapes: &[LevelShape], valid_ratio: (f64, f64)) -> Vec<Option<[f64; 4]>> {
    let mut out = Vec::new();
    for (l, s) in shapes.iter().enumerate() {
        let wh = 0.05 * 2f64.powi(l as i32);
        for y in 0..s.height {
            for x in 0..s.width {
                let cx = (x as f64 + 0.5) / s.width as f64 / valid_ratio.0;
                let cy = (y as f64 + 0.5) / s.height as f64 / valid_ratio.1;
                let b = [cx, cy, wh, wh];
                out.push(b.iter().all(|&v| v > 0.01 && v < 0.99).then_some(b));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query_engine::{assemble_layout, QueryGroupConfig};
    use gdetr_autograd::gradcheck::check_gradients;
    use gdetr_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(layers: usize, levels: usize) -> (ParamStore, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            channels: 8,
            layers,
            heads: 2,
            points: 2,
            levels,
            ffn_dim: 16,
        };
        let dec = Decoder::new(&mut store, "dec", cfg, 3, &mut rng).unwrap();
        // perturb the zero-initialized heads so every path carries signal
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
        }
        (store, dec)
    }

    fn memory<'t>(tape: &'t Tape, dims: &[(usize, usize)], c: usize) -> Memory<'t> {
        let shapes = level_shapes(dims);
        let n: usize = dims.iter().map(|(h, w)| h * w).sum();
        Memory {
            features: tape.constant(Tensor::from_fn([n, c], |i| ((i * 13 % 17) as f64 * 0.3).sin())),
            shapes: Arc::new(shapes),
            valid_ratio: (1.0, 1.0),
        }
    }

    #[test]
    fn refine_examples() {
        let a = BoxN::new(0.5, 0.3, 0.2, 0.6).unwrap();
        assert_eq!(
            refine_box(a, [0.0; 4]).to_array().map(|v| (v * 1e12).round()),
            a.to_array().map(|v| (v * 1e12).round())
        );
        let r = refine_box(a, [inverse_sigmoid(0.7, 0.0), 0.0, 0.0, 0.0]);
        assert!((r.cx - 0.7).abs() < 1e-12);
        let mut prev = 0.5;
        for d in [1.0, 5.0, 20.0, 60.0] {
            let v = refine_box(a, [d, 0.0, 0.0, 0.0]).cx;
            assert!(v >= prev);
            prev = v;
        }
        assert!(prev > 1.0 - 1e-12);
    }

    #[test]
    fn refine_gradient() {
        let inputs = [
            Tensor::new([2, 4], vec![0.3, 0.6, 0.2, 0.4, 0.7, 0.1, 0.5, 0.9]),
            Tensor::new([2, 4], vec![0.1, -0.4, 1.2, 0.0, -2.0, 0.3, 0.5, 0.7]),
        ];
        for c in check_gradients(&inputs, 1e-6, |_, v| refine(v[0], v[1]).scale(1.3).sum()) {
            assert!(c.relative_error() < 1e-6);
        }
    }

    #[test]
    fn layer_count_and_zero_layer_base_case() {
        for layers in [0, 1, 3] {
            let (store, dec) = toy(layers, 1);
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let mem = memory(&tape, &[(3, 3)], 8);
            let cfg = QueryGroupConfig {
                groups: 1,
                queries_per_group: 2,
            };
            let anchors = vec![BoxN::new(0.4, 0.5, 0.2, 0.3).unwrap(); 2];
            let content = tape.constant(Tensor::from_fn([2, 8], |i| i as f64 * 0.1));
            let layout = assemble_layout(content, &anchors, None, &cfg).unwrap();
            let preds = dec.decode(&p, &layout, &mem);
            assert_eq!(preds.len(), layers.max(1));
            for pr in &preds {
                assert!(pr.boxes.value().data().iter().all(|v| (0.0..=1.0).contains(v)));
                assert_eq!(pr.logits.shape(), vec![2, 3]);
            }
        }
    }

    #[test]
    fn micro_decode_gradient() {
        let (store, dec) = toy(1, 1);
        let inputs = [
            Tensor::from_fn([2, 8], |i| (i as f64 * 0.77).sin()),
            Tensor::from_fn([9, 8], |i| ((i * 5 % 7) as f64 * 0.5).cos()),
        ];
        let checks = check_gradients(&inputs, 1e-6, |tape, v| {
            let p = store.bind(tape, false);
            let mem = Memory {
                features: v[1],
                shapes: Arc::new(level_shapes(&[(3, 3)])),
                valid_ratio: (1.0, 1.0),
            };
            let cfg = QueryGroupConfig {
                groups: 1,
                queries_per_group: 2,
            };
            let anchors = [
                BoxN::new(0.37, 0.52, 0.3, 0.2).unwrap(),
                BoxN::new(0.61, 0.44, 0.25, 0.35).unwrap(),
            ];
            let layout = assemble_layout(v[0], &anchors, None, &cfg).unwrap();
            let pred = dec.decode(&p, &layout, &mem)[0];
            let probe = tape.constant(Tensor::from_fn([2, 3], |i| 1.0 + i as f64 * 0.2));
            pred.logits.mul(probe).sum().add(pred.boxes.sum().scale(3.0))
        });
        for (i, c) in checks.iter().enumerate() {
            assert!(c.relative_error() < 1e-3, "input {i}: {}", c.relative_error());
        }
    }

    #[test]
    fn look_forward_twice_reaches_previous_layer() {
        // layer 1 refines the undetached output of layer 0
        let (store, dec) = toy(2, 1);
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let mem = memory(&tape, &[(3, 3)], 8);
        let cfg = QueryGroupConfig {
            groups: 1,
            queries_per_group: 2,
        };
        let anchors = vec![BoxN::new(0.4, 0.5, 0.2, 0.3).unwrap(); 2];
        let content = tape.constant(Tensor::from_fn([2, 8], |i| i as f64 * 0.1));
        let layout = assemble_layout(content, &anchors, None, &cfg).unwrap();
        let preds = dec.decode(&p, &layout, &mem);
        assert_eq!(preds[1].reference.id(), preds[0].boxes.id());
        assert!(preds[1].reference.is_tracked());
        // the first layer refines constant anchors
        assert!(!preds[0].reference.is_tracked());
    }

    #[test]
    fn proposal_selection_ties_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let ts = TwoStage::new(&mut store, "enc", 4, 2, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        // identical cells give identical scores
        let mem = Memory {
            features: tape.constant(Tensor::from_fn([13, 4], |i| (i % 4) as f64)),
            shapes: Arc::new(level_shapes(&[(3, 3), (2, 2)])),
            valid_ratio: (1.0, 1.0),
        };
        let sel = ts.select(&p, &mem, 13).unwrap();
        assert_eq!(sel.cells, (0..13).collect::<Vec<_>>());
        assert!(ts.select(&p, &mem, 14).is_err());

        // one cell dominates
        let mem = Memory {
            features: tape.constant(Tensor::from_fn([13, 4], |i| {
                if i / 4 == 6 {
                    [5.0, -5.0, 3.0, -1.0][i % 4]
                } else {
                    0.0
                }
            })),
            ..mem
        };
        let scores: Vec<f64> = {
            let hidden = ts.enc_norm.forward(&p, ts.enc_output.forward(&p, mem.features));
            let l = ts.class_head.forward(&p, hidden).value();
            (0..13)
                .map(|i| l.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        };
        let best = (0..13)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .unwrap();
        assert_eq!(ts.select(&p, &mem, 3).unwrap().cells[0], best);
    }

    #[test]
    fn padded_cells_are_not_proposed() {
        let shapes = level_shapes(&[(4, 4)]);
        let g = proposal_grid(&shapes, (0.5, 1.0));
        let usable: Vec<usize> = (0..16).filter(|&i| g[i].is_some()).collect();
        assert!(usable.iter().all(|&i| i % 4 < 2));
    }
}
