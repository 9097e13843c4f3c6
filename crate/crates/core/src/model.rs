//! The full detector: ViT backbone, simple feature pyramid, two-stage query
//! selection, grouped and denoising queries, and the decoder.

use gdetr_autograd::{Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::Target;
use crate::backbone::{ImageTensor, SimpleFeaturePyramid, ViTConfig, Vit};
use crate::decoder::{Decoder, DecoderConfig, LayerPrediction, Memory, Proposals, TwoStage};
use crate::error::{invalid_config, Result};
use crate::nn::{normal, Binding, ParamId, ParamStore};
use crate::query_engine::{assemble_layout, make_denoising_queries, DenoisingConfig, DnSegment, QueryGroupConfig, Segments};

/// Name prefix of the backbone parameters.
pub const BACKBONE: &str = "backbone";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub vit: ViTConfig,
    pub decoder: DecoderConfig,
    pub queries: QueryGroupConfig,
    pub denoising: DenoisingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            vit: ViTConfig::default(),
            decoder: DecoderConfig::default(),
            queries: QueryGroupConfig::default(),
            denoising: DenoisingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(invalid_config!("num_classes must be >= 1"));
        }
        if self.decoder.levels != 4 {
            return Err(invalid_config!(
                "the feature pyramid has 4 levels, decoder.levels is {}",
                self.decoder.levels
            ));
        }
        self.vit.validate()?;
        self.decoder.validate()?;
        self.queries.validate()?;
        self.denoising.validate()
    }
}

/// Detector parameters are registered in a [`ParamStore`]; this struct
/// holds their ids and the layer structure.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub vit: Vit,
    pyramid: SimpleFeaturePyramid,
    two_stage: TwoStage,
    pub decoder: Decoder,
    content: ParamId,
    label_embed: ParamId,
}

/// All predictions of one forward pass over a single image.
#[derive(Clone, Debug)]
pub struct ForwardOutput<'t> {
    /// One entry per decoder layer over the full query sequence.
    pub layers: Vec<LayerPrediction<'t>>,
    /// Predictions on the selected proposals (matching queries only).
    pub encoder: LayerPrediction<'t>,
    pub segments: Segments,
    pub dn: DnSegment,
}

impl<'t> ForwardOutput<'t> {
    pub fn last(&self) -> &LayerPrediction<'t> {
        self.layers.last().expect("at least one layer")
    }
}

impl Detector {
    pub fn new(store: &mut ParamStore, config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.decoder.channels;
        let vit = Vit::new(store, BACKBONE, config.vit.clone(), rng)?;
        let pyramid = SimpleFeaturePyramid::new(store, "neck", config.vit.embed_dim, c, rng);
        let two_stage = TwoStage::new(store, "proposals", c, config.num_classes, rng);
        let decoder = Decoder::new(store, "decoder", config.decoder, config.num_classes, rng)?;
        let content = store.add("queries.content", normal(rng, &[config.queries.total(), c], 1.0));
        let label_embed = store.add("queries.label", normal(rng, &[config.num_classes, c], 1.0));
        Ok(Self {
            config,
            vit,
            pyramid,
            two_stage,
            decoder,
            content,
            label_embed,
        })
    }

    /// Backbone and pyramid features flattened for the decoder.
    pub fn memory<'t>(&self, p: &Binding<'t>, img: &ImageTensor) -> Result<Memory<'t>> {
        let enc = self.vit.encode(p, img)?;
        let pyramid = self.pyramid.build(p, enc, img.valid_ratio());
        Ok(Memory::from_pyramid(&pyramid))
    }

    /// Selects `groups * N` proposals and builds matching queries for them.
    pub fn proposals<'t>(&self, p: &Binding<'t>, memory: &Memory<'t>, groups: usize) -> Result<Proposals<'t>> {
        if groups == 0 || groups > self.config.queries.groups {
            return Err(invalid_config!(
                "requested {groups} query groups, model has {}",
                self.config.queries.groups
            ));
        }
        self.two_stage
            .select(p, memory, groups * self.config.queries.queries_per_group)
    }

    /// Decodes `groups` matching groups plus an optional denoising segment.
    pub fn forward_with<'t>(
        &self,
        p: &Binding<'t>,
        memory: &Memory<'t>,
        groups: usize,
        dn: Option<DnSegment>,
    ) -> Result<ForwardOutput<'t>> {
        let props = self.proposals(p, memory, groups)?;
        let n = groups * self.config.queries.queries_per_group;
        let content = p.var(self.content).slice_rows(0, n);
        let dn = dn.unwrap_or_default();
        let dn_content = (!dn.is_empty()).then(|| p.var(self.label_embed).gather_rows(&dn.labels));
        let cfg = QueryGroupConfig {
            groups,
            queries_per_group: self.config.queries.queries_per_group,
        };
        let layout = assemble_layout(content, &props.anchors, dn_content.map(|c| (c, &dn)), &cfg)?;
        let layers = self.decoder.decode(p, &layout, memory);
        Ok(ForwardOutput {
            layers,
            encoder: props.prediction,
            segments: layout.segments,
            dn,
        })
    }

    /// Training forward: all groups plus denoising queries built from `gt`.
    pub fn forward_train<'t>(
        &self,
        p: &Binding<'t>,
        img: &ImageTensor,
        gt: &Target,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput<'t>> {
        let memory = self.memory(p, img)?;
        let dn = make_denoising_queries(&gt.pairs(), &self.config.denoising, self.config.num_classes, rng)?;
        self.forward_with(p, &memory, self.config.queries.groups, Some(dn))
    }

    /// Inference forward: group 0 only, no denoising queries.
    pub fn forward_infer<'t>(&self, p: &Binding<'t>, img: &ImageTensor) -> Result<ForwardOutput<'t>> {
        let memory = self.memory(p, img)?;
        self.forward_with(p, &memory, 1, None)
    }

    /// Class logits and boxes from already-normalized query features and the
    /// references they refine, as the last decoder layer would produce them.
    pub fn predict_from<'t>(
        &self,
        p: &Binding<'t>,
        hidden: Var<'t>,
        reference: Var<'t>,
        delta: Option<Var<'t>>,
    ) -> LayerPrediction<'t> {
        let delta = delta.unwrap_or_else(|| self.decoder.box_delta(p, hidden));
        LayerPrediction {
            logits: self.decoder.classify(p, hidden),
            boxes: crate::decoder::refine(reference, delta),
            hidden,
            reference,
        }
    }

    pub fn content_embeddings(&self, store: &ParamStore) -> Tensor {
        store.get(self.content).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxN;
    use gdetr_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            num_classes: 3,
            vit: ViTConfig {
                embed_dim: 16,
                depth: 1,
                num_heads: 2,
                ..ViTConfig::default()
            },
            decoder: DecoderConfig {
                channels: 16,
                layers: 2,
                heads: 2,
                points: 2,
                levels: 4,
                ffn_dim: 32,
            },
            queries: QueryGroupConfig {
                groups: 3,
                queries_per_group: 4,
            },
            denoising: DenoisingConfig {
                total: 12,
                ..DenoisingConfig::default()
            },
        }
    }

    fn image(size: usize) -> ImageTensor {
        ImageTensor::new(
            size,
            size,
            (0..size * size * 3).map(|i| ((i * 31 % 97) as f64 / 50.0) - 1.0).collect(),
        )
        .unwrap()
    }

    #[test]
    fn training_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, tiny(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, true);
        let gt = Target::new(
            vec![BoxN::new(0.3, 0.3, 0.2, 0.2).unwrap(), BoxN::new(0.7, 0.6, 0.3, 0.2).unwrap()],
            vec![0, 2],
        )
        .unwrap();
        let out = det.forward_train(&p, &image(64), &gt, &mut rng).unwrap();
        assert_eq!(out.layers.len(), 2);
        assert_eq!(out.dn.len(), 12);
        assert_eq!(out.segments.total(), 12 + 12);
        assert_eq!(out.last().logits.shape(), vec![24, 3]);
        assert_eq!(out.encoder.len(), 12);
    }

    #[test]
    fn inference_equals_training_group_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, tiny(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let img = image(64);
        let gt = Target::new(vec![BoxN::new(0.5, 0.5, 0.3, 0.3).unwrap()], vec![1]).unwrap();
        let train = det.forward_train(&p, &img, &gt, &mut rng).unwrap();
        let infer = det.forward_infer(&p, &img).unwrap();
        let r = train.segments.group_range(0);
        let (a, b) = (train.last().boxes.value(), infer.last().boxes.value());
        assert_eq!(&a.data()[r.start * 4..r.end * 4], b.data());
        let (a, b) = (train.last().logits.value(), infer.last().logits.value());
        assert_eq!(&a.data()[r.start * 3..r.end * 3], b.data());
    }

    #[test]
    fn too_many_groups_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let det = Detector::new(&mut store, tiny(), &mut rng).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mem = det.memory(&p, &image(64)).unwrap();
        assert!(det.forward_with(&p, &mem, 4, None).is_err());
    }
}
