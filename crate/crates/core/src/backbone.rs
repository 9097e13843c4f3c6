//! Plain ViT encoder, the simple multi-scale feature pyramid built on its
//! single-stride output, and layer-wise learning-rate decay.

use std::sync::Arc;

use gdetr_autograd::{Tensor, Var, ZERO};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{invalid_arg, invalid_config, Result};
use crate::nn::{Binding, LayerNorm, Linear, ParamStore};

/// Strides of the pyramid levels, finest first.
pub const PYRAMID_STRIDES: [usize; 4] = [8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    /// Per-channel mean of pixel values scaled to `[0, 1]`.
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 192,
            depth: 6,
            num_heads: 3,
            mlp_ratio: 4,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return Err(invalid_config!("ViT sizes must be positive: {self:?}"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(invalid_config!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim,
                self.num_heads
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(invalid_config!(
                "embed_dim {} must be a multiple of 4 for 2-d sine position embeddings",
                self.embed_dim
            ));
        }
        Ok(())
    }
}

/// Normalized channels-last image, zero-padded bottom/right to a patch multiple.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    /// Padded height and width.
    pub height: usize,
    pub width: usize,
    /// Extent of real pixels before padding.
    pub valid_height: usize,
    pub valid_width: usize,
    /// `height * width * 3` values, channels last.
    pub data: Vec<f64>,
}

impl ImageTensor {
    /// Unpadded tensor from raw channels-last values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(invalid_arg!("{height}x{width}x3 image needs {} values", height * width * 3));
        }
        Ok(Self {
            height,
            width,
            valid_height: height,
            valid_width: width,
            data,
        })
    }

    /// Normalizes with the config's mean/std and pads to a multiple of the patch size.
    pub fn from_image(img: &Image, cfg: &ViTConfig) -> Self {
        let p = cfg.patch_size;
        let (vh, vw) = (img.height(), img.width());
        let height = vh.div_ceil(p) * p;
        let width = vw.div_ceil(p) * p;
        let mut data = vec![0.0; height * width * 3];
        for y in 0..vh {
            for x in 0..vw {
                let px = img.get(x, y);
                for c in 0..3 {
                    data[(y * width + x) * 3 + c] = (px[c] as f64 / 255.0 - cfg.mean[c]) / cfg.std[c];
                }
            }
        }
        Self {
            height,
            width,
            valid_height: vh,
            valid_width: vw,
            data,
        }
    }

    /// Fraction of the padded canvas covered by real pixels, `(x, y)`.
    pub fn valid_ratio(&self) -> (f64, f64) {
        (
            self.valid_width as f64 / self.width as f64,
            self.valid_height as f64 / self.height as f64,
        )
    }
}

/// Flattened patches, `[tokens, patch*patch*3]`, plus the `(rows, cols)` grid.
#[derive(Clone, Debug)]
pub struct Patches {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// Cuts an image into non-overlapping square patches in raster order.
pub fn patchify(img: &ImageTensor, patch: usize) -> Result<Patches> {
    if patch == 0 || !img.height.is_multiple_of(patch) || !img.width.is_multiple_of(patch) {
        return Err(invalid_arg!(
            "image {}x{} is not padded to a multiple of patch size {patch}",
            img.height,
            img.width
        ));
    }
    let (gh, gw) = (img.height / patch, img.width / patch);
    let dim = patch * patch * 3;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for gy in 0..gh {
        for gx in 0..gw {
            for dy in 0..patch {
                let y = gy * patch + dy;
                let start = (y * img.width + gx * patch) * 3;
                data.extend_from_slice(&img.data[start..start + patch * 3]);
            }
        }
    }
    Ok(Patches {
        tokens: Tensor::new([gh * gw, dim], data),
        grid: (gh, gw),
    })
}

/// Fixed 2-d sine-cosine position embedding, `[gh*gw, dim]`.
pub fn sincos_position_embedding(gh: usize, gw: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(gh * gw * dim);
    for y in 0..gh {
        for x in 0..gw {
            for pos in [y as f64, x as f64] {
                for f in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(f as f64 / quarter as f64);
                    data.push((pos * omega).sin());
                }
                for f in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(f as f64 / quarter as f64);
                    data.push((pos * omega).cos());
                }
            }
        }
    }
    Tensor::new([gh * gw, dim], data)
}

#[derive(Clone, Debug)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &ViTConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.embed_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), d, 3 * d, rng),
            proj: Linear::new(store, &format!("{name}.attn.proj"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), d, cfg.mlp_ratio * d, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_ratio * d, d, rng),
            heads: cfg.num_heads,
        }
    }

    fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let d = x.cols();
        let h = self.norm1.forward(p, x);
        let qkv = self.qkv.forward(p, h);
        let (q, k, v) = (qkv.slice_cols(0, d), qkv.slice_cols(d, 2 * d), qkv.slice_cols(2 * d, 3 * d));
        let attn = self.proj.forward(p, q.attention(k, v, self.heads, None));
        let x = x.add(attn);
        let h = self.norm2.forward(p, x);
        let h = self.fc2.forward(p, self.fc1.forward(p, h).gelu());
        x.add(h)
    }
}

/// Stride-16 encoder output.
#[derive(Clone, Copy, Debug)]
pub struct Encoded<'t> {
    /// `[gh*gw, embed_dim]`, raster order.
    pub features: Var<'t>,
    pub grid: (usize, usize),
}

/// Plain vision transformer with global attention in every block.
#[derive(Clone, Debug)]
pub struct Vit {
    pub config: ViTConfig,
    patch_embed: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Vit {
    pub fn new(store: &mut ParamStore, prefix: &str, config: ViTConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let pdim = config.patch_size * config.patch_size * 3;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), pdim, config.embed_dim, rng);
        let blocks = (0..config.depth)
            .map(|i| Block::new(store, &format!("{prefix}.blocks.{i}"), &config, rng))
            .collect();
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), config.embed_dim);
        Ok(Self {
            config,
            patch_embed,
            blocks,
            norm,
        })
    }

    /// Patch tokens after the linear stem, before position embeddings.
    pub fn embed_patches<'t>(&self, p: &Binding<'t>, img: &ImageTensor) -> Result<(Var<'t>, (usize, usize))> {
        let patches = patchify(img, self.config.patch_size)?;
        let tokens = p.tape().constant(patches.tokens);
        Ok((self.patch_embed.forward(p, tokens), patches.grid))
    }

    pub fn encode<'t>(&self, p: &Binding<'t>, img: &ImageTensor) -> Result<Encoded<'t>> {
        let (tokens, grid) = self.embed_patches(p, img)?;
        let pos = p
            .tape()
            .constant(sincos_position_embedding(grid.0, grid.1, self.config.embed_dim));
        let mut x = tokens.add(pos);
        for b in &self.blocks {
            x = b.forward(p, x);
        }
        Ok(Encoded {
            features: self.norm.forward(p, x),
            grid,
        })
    }
}

/// One pyramid level: a `[height*width, channels]` map in raster order.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel<'t> {
    pub map: Var<'t>,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Multi-resolution feature maps with a shared channel count.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t> {
    pub levels: Vec<PyramidLevel<'t>>,
    /// Fraction of each map covered by real (unpadded) pixels, `(x, y)`.
    pub valid_ratio: (f64, f64),
}

impl<'t> FeaturePyramid<'t> {
    pub fn channels(&self) -> usize {
        self.levels[0].map.cols()
    }

    pub fn total_cells(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }
}

/// Index map for a 2x2 space-to-depth with zero padding on odd sides.
fn space_to_depth_map(h: usize, w: usize, c: usize) -> (usize, usize, Arc<Vec<usize>>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut map = Vec::with_capacity(ho * wo * 4 * c);
    for i in 0..ho {
        for j in 0..wo {
            for di in 0..2 {
                for dj in 0..2 {
                    let (y, x) = (2 * i + di, 2 * j + dj);
                    for ch in 0..c {
                        map.push(if y < h && x < w { (y * w + x) * c + ch } else { ZERO });
                    }
                }
            }
        }
    }
    (ho, wo, Arc::new(map))
}

/// Index map for a 2x2 depth-to-space (pixel shuffle).
fn depth_to_space_map(h: usize, w: usize, c: usize) -> Arc<Vec<usize>> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut map = vec![0; ho * wo * c];
    for i in 0..h {
        for j in 0..w {
            for di in 0..2 {
                for dj in 0..2 {
                    for ch in 0..c {
                        let out = ((2 * i + di) * wo + (2 * j + dj)) * c + ch;
                        map[out] = (i * w + j) * 4 * c + (di * 2 + dj) * c + ch;
                    }
                }
            }
        }
    }
    Arc::new(map)
}

/// Builds strides {8, 16, 32, 64} from the stride-16 map: a learned 2x
/// upsampling, an identity-resolution projection, and one or two stride-2
/// 2x2 convolutions. Every level ends in a layer norm over `channels`.
#[derive(Clone, Debug)]
pub struct SimpleFeaturePyramid {
    pub channels: usize,
    up: Linear,
    lateral: Linear,
    down1: Linear,
    down2: Linear,
    norms: Vec<LayerNorm>,
}

impl SimpleFeaturePyramid {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            channels,
            up: Linear::new(store, &format!("{prefix}.up"), in_dim, 4 * channels, rng),
            lateral: Linear::new(store, &format!("{prefix}.lateral"), in_dim, channels, rng),
            down1: Linear::new(store, &format!("{prefix}.down1"), 4 * in_dim, channels, rng),
            down2: Linear::new(store, &format!("{prefix}.down2"), 4 * channels, channels, rng),
            norms: PYRAMID_STRIDES
                .iter()
                .map(|s| LayerNorm::new(store, &format!("{prefix}.norm_s{s}"), channels))
                .collect(),
        }
    }

    pub fn build<'t>(&self, p: &Binding<'t>, enc: Encoded<'t>, valid_ratio: (f64, f64)) -> FeaturePyramid<'t> {
        let (gh, gw) = enc.grid;
        let d = enc.features.cols();
        let c = self.channels;

        let up = self.up.forward(p, enc.features);
        let s8 = up.remap([4 * gh * gw, c], depth_to_space_map(gh, gw, c));

        let s16 = self.lateral.forward(p, enc.features);

        let (h32, w32, m32) = space_to_depth_map(gh, gw, d);
        let s32 = self.down1.forward(p, enc.features.remap([h32 * w32, 4 * d], m32));

        let (h64, w64, m64) = space_to_depth_map(h32, w32, c);
        let s64 = self.down2.forward(p, s32.remap([h64 * w64, 4 * c], m64));

        let raw = [(s8, 2 * gh, 2 * gw), (s16, gh, gw), (s32, h32, w32), (s64, h64, w64)];
        let levels = raw
            .into_iter()
            .zip(PYRAMID_STRIDES)
            .zip(&self.norms)
            .map(|(((map, height, width), stride), norm)| PyramidLevel {
                map: norm.forward(p, map),
                height,
                width,
                stride,
            })
            .collect();
        FeaturePyramid { levels, valid_ratio }
    }
}

/// Learning-rate group of a parameter under layer-wise decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Patch embedding.
    Stem,
    /// Transformer block `i` (0-based).
    Block(usize),
    /// Everything else (final encoder norm, pyramid, decoder, heads).
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerDecaySpec {
    pub decay_rate: f64,
    pub depth: usize,
}

impl LayerDecaySpec {
    pub fn new(decay_rate: f64, depth: usize) -> Result<Self> {
        if !(decay_rate > 0.0 && decay_rate <= 1.0) {
            return Err(invalid_arg!("layer decay rate must be in (0, 1], got {decay_rate}"));
        }
        Ok(Self { decay_rate, depth })
    }

    /// `rate^L` for the stem, `rate^(L-i)` for block `i`, 1 otherwise.
    pub fn multiplier(&self, group: ParamGroup) -> f64 {
        let l = self.depth as i32;
        match group {
            ParamGroup::Stem => self.decay_rate.powi(l),
            ParamGroup::Block(i) => self.decay_rate.powi(l - i as i32),
            ParamGroup::Rest => 1.0,
        }
    }
}

/// Multiplier for every group: stem, blocks `0..L`, rest.
pub fn layer_decay_multipliers(spec: LayerDecaySpec) -> Vec<(ParamGroup, f64)> {
    std::iter::once(ParamGroup::Stem)
        .chain((0..spec.depth).map(ParamGroup::Block))
        .chain(std::iter::once(ParamGroup::Rest))
        .map(|g| (g, spec.multiplier(g)))
        .collect()
}

/// Classifies an encoder parameter name (`<prefix>.patch_embed.*`,
/// `<prefix>.blocks.<i>.*`, `<prefix>.norm.*`).
pub fn classify_encoder_param(name: &str, prefix: &str, depth: usize) -> Result<ParamGroup> {
    let rest = name
        .strip_prefix(prefix)
        .and_then(|r| r.strip_prefix('.'))
        .ok_or_else(|| invalid_config!("parameter {name} is not under {prefix}"))?;
    if rest.starts_with("patch_embed.") {
        return Ok(ParamGroup::Stem);
    }
    if rest.starts_with("norm.") {
        return Ok(ParamGroup::Rest);
    }
    if let Some(b) = rest.strip_prefix("blocks.") {
        let idx = b.split('.').next().and_then(|s| s.parse::<usize>().ok());
        return match idx {
            Some(i) if i < depth => Ok(ParamGroup::Block(i)),
            _ => Err(invalid_config!("parameter {name} names an unknown block")),
        };
    }
    Err(invalid_config!("unrecognized encoder parameter {name}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use gdetr_autograd::gradcheck::check_gradients;
    use gdetr_autograd::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ViTConfig {
        ViTConfig {
            patch_size: 16,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2,
            ..ViTConfig::default()
        }
    }

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new(h, w, (0..h * w * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn patchify_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, w, n, grid) in [(64, 64, 16, (4, 4)), (16, 16, 1, (1, 1)), (64, 96, 24, (4, 6))] {
            let p = patchify(&rand_image(&mut rng, h, w), 16).unwrap();
            assert_eq!(p.tokens.shape(), &[n, 768]);
            assert_eq!(p.grid, grid);
        }
        assert!(patchify(&rand_image(&mut rng, 20, 16), 16).is_err());
    }

    #[test]
    fn from_image_pads_bottom_right() {
        let img = Image::new(20, 10, [255, 255, 255]);
        let t = ImageTensor::from_image(&img, &tiny_cfg());
        assert_eq!((t.height, t.width, t.valid_height, t.valid_width), (16, 32, 10, 20));
        assert_eq!(t.data[(15 * 32 + 31) * 3], 0.0);
        assert!(t.data[0] > 0.0);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let vit = Vit::new(&mut store, "backbone", tiny_cfg(), &mut rng).unwrap();
        let img = rand_image(&mut rng, 32, 48);
        let run = || {
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let e = vit.encode(&p, &img).unwrap();
            ((*e.features.value()).clone(), e.grid)
        };
        let (a, grid) = run();
        assert_eq!(grid, (2, 3));
        assert_eq!(a.shape(), &[6, 16]);
        let (b, _) = run();
        assert_eq!(a, b);
    }

    #[test]
    fn translating_by_one_patch_shifts_stem_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let vit = Vit::new(&mut store, "backbone", tiny_cfg(), &mut rng).unwrap();
        let (h, w) = (32, 48);
        let img = rand_image(&mut rng, h, w);
        // shift right by one patch, filling the vacated column with zeros
        let mut shifted = vec![0.0; h * w * 3];
        for y in 0..h {
            for x in 16..w {
                for c in 0..3 {
                    shifted[(y * w + x) * 3 + c] = img.data[(y * w + x - 16) * 3 + c];
                }
            }
        }
        let shifted = ImageTensor::new(h, w, shifted).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let (a, _) = vit.embed_patches(&p, &img).unwrap();
        let (b, _) = vit.embed_patches(&p, &shifted).unwrap();
        let (a, b) = (a.value(), b.value());
        for gy in 0..2 {
            for gx in 1..3 {
                assert_eq!(b.row(gy * 3 + gx), a.row(gy * 3 + gx - 1));
            }
        }
    }

    #[test]
    fn pyramid_shape_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = ViTConfig { depth: 1, ..tiny_cfg() };
        let vit = Vit::new(&mut store, "backbone", cfg, &mut rng).unwrap();
        let fpn = SimpleFeaturePyramid::new(&mut store, "neck", 16, 8, &mut rng);
        for side in (64..=256).step_by(16) {
            let img = ImageTensor::new(side, side, vec![0.1; side * side * 3]).unwrap();
            let tape = Tape::new();
            let p = store.bind(&tape, false);
            let enc = vit.encode(&p, &img).unwrap();
            let pyr = fpn.build(&p, enc, img.valid_ratio());
            for (lvl, s) in pyr.levels.iter().zip(PYRAMID_STRIDES) {
                assert_eq!(lvl.stride, s);
                assert_eq!(lvl.height, side.div_ceil(s));
                assert_eq!(lvl.width, side.div_ceil(s));
                assert_eq!(lvl.map.shape(), vec![lvl.height * lvl.width, 8]);
            }
        }
    }

    #[test]
    fn pyramid_from_4x4_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let fpn = SimpleFeaturePyramid::new(&mut store, "neck", 6, 5, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let f16 = tape.constant(Tensor::from_fn([16, 6], |i| (i as f64 * 0.37).sin()));
        let pyr = fpn.build(
            &p,
            Encoded {
                features: f16,
                grid: (4, 4),
            },
            (1.0, 1.0),
        );
        let dims: Vec<_> = pyr.levels.iter().map(|l| (l.height, l.width)).collect();
        assert_eq!(dims, [(8, 8), (4, 4), (2, 2), (1, 1)]);
        assert!(pyr.levels.iter().all(|l| l.map.cols() == 5));
    }

    #[test]
    fn pyramid_gradient_reaches_input_from_every_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let fpn = SimpleFeaturePyramid::new(&mut store, "neck", 3, 4, &mut rng);
        let f16 = Tensor::from_fn([4, 3], |i| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        for level in 0..4 {
            let checks = check_gradients(std::slice::from_ref(&f16), 1e-6, |tape, v| {
                let p = store.bind(tape, false);
                let pyr = fpn.build(
                    &p,
                    Encoded {
                        features: v[0],
                        grid: (2, 2),
                    },
                    (1.0, 1.0),
                );
                let m = pyr.levels[level].map;
                let w = tape.constant(Tensor::from_fn(m.shape(), |i| ((i as f64) * 0.91).cos()));
                m.mul(w).sum()
            });
            let c = &checks[0];
            assert!(c.analytic.max_abs() > 0.0, "level {level} has no gradient");
            assert!(c.relative_error() < 1e-5, "level {level}: {}", c.relative_error());
        }
    }

    #[test]
    fn layer_decay_examples() {
        let spec = LayerDecaySpec::new(0.5, 2).unwrap();
        let m = layer_decay_multipliers(spec);
        assert_eq!(
            m,
            vec![
                (ParamGroup::Stem, 0.25),
                (ParamGroup::Block(0), 0.25),
                (ParamGroup::Block(1), 0.5),
                (ParamGroup::Rest, 1.0)
            ]
        );
        let ones = layer_decay_multipliers(LayerDecaySpec::new(1.0, 6).unwrap());
        assert!(ones.iter().all(|&(_, v)| v == 1.0));
        let s = LayerDecaySpec::new(0.8, 6).unwrap();
        let blocks: Vec<f64> = (0..6).map(|i| s.multiplier(ParamGroup::Block(i))).collect();
        assert!(blocks.windows(2).all(|w| w[0] <= w[1]));
        assert!(LayerDecaySpec::new(0.0, 2).is_err());
        assert!(LayerDecaySpec::new(1.01, 2).is_err());
    }

    #[test]
    fn classify_names() {
        assert_eq!(
            classify_encoder_param("backbone.patch_embed.w", "backbone", 2).unwrap(),
            ParamGroup::Stem
        );
        assert_eq!(
            classify_encoder_param("backbone.blocks.1.attn.qkv.w", "backbone", 2).unwrap(),
            ParamGroup::Block(1)
        );
        assert_eq!(
            classify_encoder_param("backbone.norm.g", "backbone", 2).unwrap(),
            ParamGroup::Rest
        );
        assert!(classify_encoder_param("backbone.blocks.2.x", "backbone", 2).is_err());
        assert!(classify_encoder_param("backbone.mystery", "backbone", 2).is_err());
    }
}
