//! Recording tape, variable handles and the backward sweep.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use crate::Tensor;

/// Backward function of a recorded op.
///
/// Receives the gradient of the op output and accumulates parent gradients
/// into the sink.
pub type BackwardFn = Box<dyn Fn(&Tensor, &mut GradSink<'_>)>;

struct Node {
    value: Arc<Tensor>,
    tracked: bool,
    backward: Option<BackwardFn>,
}

/// Append-only record of a computation.
///
/// Nodes are created in topological order, so a single reverse sweep over
/// node ids computes all gradients.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Leaf whose gradient is tracked (a trainable parameter or probed input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.leaf_shared(Arc::new(value))
    }

    /// Tracked leaf sharing storage with the caller.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        let id = self.push(Node {
            value,
            tracked: true,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Untracked input; no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        let id = self.push(Node {
            value,
            tracked: false,
            backward: None,
        });
        Var { tape: self, id }
    }

    /// Records a custom op.
    ///
    /// `backward` is only kept when at least one parent is tracked. It is
    /// called with the output gradient and must route gradients to parents
    /// through [`GradSink::accumulate`] (or one of its variants).
    pub fn custom<'t>(&'t self, parents: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        self.custom_shared(parents, Arc::new(value), backward)
    }

    /// Like [`Tape::custom`] for ops whose backward also needs the output.
    pub fn custom_shared<'t>(&'t self, parents: &[Var<'t>], value: Arc<Tensor>, backward: BackwardFn) -> Var<'t> {
        let tracked = parents.iter().any(|p| {
            debug_assert!(std::ptr::eq(p.tape, self), "parent from another tape");
            p.is_tracked()
        });
        let id = self.push(Node {
            value,
            tracked,
            backward: tracked.then_some(backward),
        });
        Var { tape: self, id }
    }

    /// Reverse sweep seeded with `d(root)/d(root) = 1`.
    ///
    /// `root` must hold a single value.
    pub fn backward(&self, root: Var<'_>) -> Grads {
        let seed = {
            let v = root.value();
            assert_eq!(v.numel(), 1, "backward root must be a scalar, got {:?}", v.shape());
            Tensor::ones(v.shape().to_vec())
        };
        self.backward_with(root, seed)
    }

    /// Reverse sweep seeded with an arbitrary output gradient.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.shape(), seed.shape(), "seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(seed);
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            {
                let mut sink = GradSink {
                    grads: &mut grads,
                    nodes: &nodes,
                };
                backward(&g, &mut sink);
            }
            // Interior gradients are dropped once propagated; only leaf
            // gradients survive the sweep.
            drop(g);
        }
        Grads { grads }
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Position of a node on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Lifetime-free reference for use inside backward closures.
    pub fn node(&self) -> NodeId {
        NodeId(self.id)
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Same value, cut from the gradient graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant_shared(self.value())
    }

    /// Convenience for scalar results.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradient accumulator handed to backward functions.
pub struct GradSink<'a> {
    grads: &'a mut Vec<Option<Tensor>>,
    nodes: &'a [Node],
}

impl GradSink<'_> {
    pub fn wants(&self, v: NodeId) -> bool {
        self.nodes[v.0].tracked
    }

    /// Adds `g` to the gradient of `v`; ignored for untracked vars.
    pub fn accumulate(&mut self, v: NodeId, g: Tensor) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape();
                assert_eq!(g.numel(), shape.iter().product::<usize>(), "gradient size mismatch");
                *slot = Some(g.reshape(shape.to_vec()));
            }
        }
    }

    /// Mutable access to the (zero-initialized) gradient buffer of `v`.
    ///
    /// Returns `None` for untracked vars so kernels can skip the work.
    pub fn buffer(&mut self, v: NodeId) -> Option<&mut Tensor> {
        if !self.wants(v) {
            return None;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        }
        slot.as_mut()
    }
}

/// Result of a backward sweep.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, if any flowed into it.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient or zeros shaped like `v`.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}
