//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every op applied to [`Var`] handles; [`Tape::backward`]
//! sweeps it once in reverse. Ops are methods on `Var` (element-wise math,
//! matrix products, layer norm, masked multi-head attention, focal loss) and
//! [`Tape::custom`] lets downstream crates register fused kernels with their
//! own backward pass.
//!
//! ```
//! use gdetr_autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new([1, 2], vec![1.0, 2.0]));
//! let w = tape.leaf(Tensor::new([2, 1], vec![3.0, 4.0]));
//! let y = x.matmul(w).sum();
//! let grads = tape.backward(y);
//! assert_eq!(y.item(), 11.0);
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0]);
//! ```

pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use ops::elementwise::{inverse_sigmoid, sigmoid, softplus};
pub use ops::loss::focal_term;
pub use ops::matmul::gemm;
pub use ops::nn::{softmax_in_place, SpanMask};
pub use ops::shape::ZERO;
pub use tape::{BackwardFn, GradSink, Grads, NodeId, Tape, Var};
pub use tensor::Tensor;
