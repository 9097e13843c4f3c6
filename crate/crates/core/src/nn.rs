//! Named parameter storage and the small layers the model is built from.

use std::collections::HashMap;
use std::sync::Arc;

use gdetr_autograd::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered set of named model parameters.
///
/// Names are stable and hierarchical (`decoder.layers.0.ffn.fc1.w`) so they
/// can key checkpoints, EMA shadows and optimizer groups.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.names.len());
        if self.index.insert(name.clone(), id).is_some() {
            panic!("duplicate parameter name {name}");
        }
        self.names.push(name);
        self.values.push(Arc::new(value));
        id
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Mutable access; clones the storage if a tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| &**v))
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Records every parameter on `tape`, tracked when `train` is set.
    pub fn bind<'t>(&self, tape: &'t Tape, train: bool) -> Binding<'t> {
        let vars = self
            .values
            .iter()
            .map(|v| {
                if train {
                    tape.leaf_shared(v.clone())
                } else {
                    tape.constant_shared(v.clone())
                }
            })
            .collect();
        Binding { tape, vars }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Binding<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Glorot-uniform matrix of shape `[fan_in, fan_out]`.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.random_range(-bound..bound))
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.w"), xavier_uniform(rng, in_dim, out_dim));
        let bias = Some(store.add(format!("{name}.b"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Zero-initialized weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.w"), Tensor::zeros([in_dim, out_dim]));
        let bias = Some(store.add(format!("{name}.b"), Tensor::zeros([out_dim])));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        x.linear(p.var(self.weight), self.bias.map(|b| p.var(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.g"), Tensor::ones([dim])),
            beta: store.add(format!("{name}.b"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), Self::EPS)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, p: &Binding<'t>, mut x: Var<'t>) -> Var<'t> {
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(p, x);
            if i < last {
                x = x.relu();
            }
        }
        x
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty mlp")
    }
}
