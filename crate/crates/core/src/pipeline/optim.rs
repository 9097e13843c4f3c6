//! Parameter groups with layer-wise learning-rate decay, AdamW, and the
//! warmup plus step-decay schedule.

use std::collections::BTreeMap;

use gdetr_autograd::Tensor;

use crate::backbone::{classify_encoder_param, LayerDecaySpec, ParamGroup};
use crate::error::{invalid_config, Result};
use crate::model::BACKBONE;
use crate::nn::ParamStore;

/// Non-backbone parameter prefixes; all of them train at the base rate.
pub const HEAD_PREFIXES: [&str; 5] = ["neck", "proposals", "decoder", "queries", "pretext"];

/// Parameters sharing one learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerGroup {
    pub group: ParamGroup,
    pub lr: f64,
    pub params: Vec<String>,
}

/// The decay group of a parameter name; unknown names are an error.
pub fn param_group(name: &str, depth: usize) -> Result<ParamGroup> {
    if name.starts_with(BACKBONE) && name[BACKBONE.len()..].starts_with('.') {
        return classify_encoder_param(name, BACKBONE, depth);
    }
    let head = name.split('.').next().unwrap_or_default();
    if HEAD_PREFIXES.contains(&head) {
        Ok(ParamGroup::Rest)
    } else {
        Err(invalid_config!("no optimizer group for parameter {name}"))
    }
}

/// Partitions all parameters into groups with `base_lr` scaled by the
/// layer-decay multiplier of each group. Empty groups are omitted.
pub fn build_optimizer_groups(store: &ParamStore, base_lr: f64, layer_decay: f64, depth: usize) -> Result<Vec<OptimizerGroup>> {
    let spec = LayerDecaySpec::new(layer_decay, depth)?;
    let mut groups: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
    for name in store.names() {
        groups.entry(param_group(name, depth)?).or_default().push(name.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(group, params)| OptimizerGroup {
            group,
            lr: base_lr * spec.multiplier(group),
            params,
        })
        .collect())
}

/// Learning-rate factor: linear warmup over the first `warmup_frac` of
/// iterations, then `decay_factor` from `decay_at` of the run on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub iterations: usize,
    pub warmup_frac: f64,
    pub decay_at: f64,
    pub decay_factor: f64,
}

impl Schedule {
    pub fn factor(&self, iter: usize) -> f64 {
        let warmup = ((self.warmup_frac * self.iterations as f64).ceil() as usize).max(1);
        let warm = ((iter + 1) as f64 / warmup as f64).min(1.0);
        let drop_at = (self.decay_at * self.iterations as f64).floor() as usize;
        if iter >= drop_at {
            warm * self.decay_factor
        } else {
            warm
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Decay applies to matrices only, not
/// to biases or normalization parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update. `grads` and `lrs` are indexed like the store's parameters;
    /// parameters without a gradient keep their value and moments.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lrs: &[f64]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), &lr) in ids.into_iter().zip(grads).zip(lrs) {
            let Some(g) = g else { continue };
            let name = store.name(id).to_string();
            let shape = g.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(shape));
            let p = store.get_mut(id);
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * *w);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ViTConfig, Vit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(depth: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let cfg = ViTConfig {
            embed_dim: 8,
            depth,
            num_heads: 2,
            mlp_ratio: 1,
            ..ViTConfig::default()
        };
        Vit::new(&mut store, BACKBONE, cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.add("decoder.head.w", Tensor::zeros([2, 2]));
        store
    }

    #[test]
    fn depth_two_rates() {
        let groups = build_optimizer_groups(&toy(2), 1e-3, 0.5, 2).unwrap();
        let lrs: Vec<(ParamGroup, f64)> = groups.iter().map(|g| (g.group, g.lr)).collect();
        assert_eq!(
            lrs,
            vec![
                (ParamGroup::Stem, 2.5e-4),
                (ParamGroup::Block(0), 2.5e-4),
                (ParamGroup::Block(1), 5e-4),
                (ParamGroup::Rest, 1e-3)
            ]
        );
    }

    #[test]
    fn groups_partition_parameters() {
        let store = toy(3);
        let groups = build_optimizer_groups(&store, 1.0, 0.7, 3).unwrap();
        let mut all: Vec<&String> = groups.iter().flat_map(|g| &g.params).collect();
        all.sort();
        let mut names: Vec<&String> = store.names().iter().collect();
        names.sort();
        assert_eq!(all, names);
        let flat = build_optimizer_groups(&store, 1.0, 1.0, 3).unwrap();
        assert!(flat.iter().all(|g| g.lr == 1.0));
    }

    #[test]
    fn unknown_name_fails_fast() {
        let mut store = toy(1);
        store.add("mystery.w", Tensor::zeros([1]));
        let err = build_optimizer_groups(&store, 1.0, 0.9, 1).unwrap_err();
        assert!(err.to_string().contains("mystery.w"));
    }

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            iterations: 1000,
            warmup_frac: 0.01,
            decay_at: 0.8,
            decay_factor: 0.1,
        };
        assert_eq!(s.factor(0), 0.1);
        assert_eq!(s.factor(9), 1.0);
        assert_eq!(s.factor(799), 1.0);
        assert!((s.factor(800) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::new([2], vec![3.0, 4.0])), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        let g0 = g[0].as_ref().unwrap();
        assert!((g0.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("decoder.x", Tensor::new([2], vec![1.0, 1.0]));
        let mut opt = AdamW::new(0.0);
        opt.update(&mut store, &[Some(Tensor::new([2], vec![0.5, -2.0]))], &[0.1]);
        let x = store.get_by_name("decoder.x").unwrap().data();
        assert!((x[0] - 0.9).abs() < 1e-6 && (x[1] - 1.1).abs() < 1e-6);
    }
}
