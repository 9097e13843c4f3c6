//! Element-wise unary and binary ops, plus row broadcasting.

use std::sync::Arc;

use crate::{Tensor, Var};

// named methods rather than operator traits so graph construction reads left to right
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn unary(
        self,
        forward: impl Fn(f64) -> f64,
        // derivative given (input, output)
        derivative: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Arc::new(x.map(forward));
        let yc = y.clone();
        let px = self.node();
        self.tape.custom_shared(
            &[self],
            y,
            Box::new(move |g, sink| {
                let data = x
                    .data()
                    .iter()
                    .zip(yc.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * derivative(xi, yi))
                    .collect();
                sink.accumulate(px, Tensor::new(x.shape().to_vec(), data));
            }),
        )
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t> {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// Absolute value; subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    /// `log(x / (1 - x))` after clamping `x` to `[eps, 1 - eps]`.
    pub fn inverse_sigmoid(self, eps: f64) -> Var<'t> {
        self.unary(
            move |x| inverse_sigmoid(x, eps),
            move |x, _| {
                if x < eps || x > 1.0 - eps {
                    0.0
                } else {
                    1.0 / (x * (1.0 - x))
                }
            },
        )
    }

    fn binary(
        self,
        other: Var<'t>,
        forward: impl Fn(f64, f64) -> f64,
        // partials (d/da, d/db) given (a, b)
        partials: impl Fn(f64, f64) -> (f64, f64) + 'static,
    ) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "binary op shape mismatch");
        let y = a.zip_map(&b, forward);
        let (pa, pb) = (self.node(), other.node());
        self.tape.custom(
            &[self, other],
            y,
            Box::new(move |g, sink| {
                let n = g.numel();
                let mut ga = Vec::with_capacity(n);
                let mut gb = Vec::with_capacity(n);
                for i in 0..n {
                    let (da, db) = partials(a.data()[i], b.data()[i]);
                    ga.push(g.data()[i] * da);
                    gb.push(g.data()[i] * db);
                }
                sink.accumulate(pa, Tensor::new(a.shape().to_vec(), ga));
                sink.accumulate(pb, Tensor::new(b.shape().to_vec(), gb));
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let y = a.zip_map(&b, |x, y| x + y);
        let (pa, pb) = (self.node(), other.node());
        self.tape.custom(
            &[self, other],
            y,
            Box::new(move |g, sink| {
                sink.accumulate(pa, g.clone());
                sink.accumulate(pb, g.clone());
            }),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, |_, _| (1.0, -1.0))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    /// Element-wise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, f64::min, |a, b| if a <= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    /// Element-wise maximum; ties route the gradient to `self`.
    pub fn maximum(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, f64::max, |a, b| if a >= b { (1.0, 0.0) } else { (0.0, 1.0) })
    }

    /// Adds a `[cols]` row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let x = self.value();
        let r = row.value();
        let cols = x.cols();
        assert_eq!(r.numel(), cols, "add_row width mismatch");
        let mut y = (*x).clone();
        for chunk in y.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        let (px, pr) = (self.node(), row.node());
        let rshape = r.shape().to_vec();
        self.tape.custom(
            &[self, row],
            y,
            Box::new(move |g, sink| {
                sink.accumulate(px, g.clone());
                if sink.wants(pr) {
                    let mut acc = vec![0.0; cols];
                    for chunk in g.data().chunks(cols) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    sink.accumulate(pr, Tensor::new(rshape.clone(), acc));
                }
            }),
        )
    }

    /// Multiplies every row element-wise by a `[cols]` row vector.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let x = self.value();
        let r = row.value();
        let cols = x.cols();
        assert_eq!(r.numel(), cols, "mul_row width mismatch");
        let mut y = (*x).clone();
        for chunk in y.data_mut().chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(r.data()) {
                *v *= b;
            }
        }
        let (px, pr) = (self.node(), row.node());
        self.tape.custom(
            &[self, row],
            y,
            Box::new(move |g, sink| {
                if sink.wants(px) {
                    let mut gx = g.clone();
                    for chunk in gx.data_mut().chunks_mut(cols) {
                        for (v, b) in chunk.iter_mut().zip(r.data()) {
                            *v *= b;
                        }
                    }
                    sink.accumulate(px, gx);
                }
                if sink.wants(pr) {
                    let mut acc = vec![0.0; cols];
                    for (gc, xc) in g.data().chunks(cols).zip(x.data().chunks(cols)) {
                        for j in 0..cols {
                            acc[j] += gc[j] * xc[j];
                        }
                    }
                    sink.accumulate(pr, Tensor::new(r.shape().to_vec(), acc));
                }
            }),
        )
    }

    /// Multiplies each row `i` by the scalar `col[i]` of a `[rows]` or `[rows, 1]` var.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let x = self.value();
        let c = col.value();
        let (rows, cols) = (x.rows(), x.cols());
        assert_eq!(c.numel(), rows, "mul_col height mismatch");
        let mut y = (*x).clone();
        for (i, chunk) in y.data_mut().chunks_mut(cols).enumerate() {
            let s = c.data()[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let (px, pc) = (self.node(), col.node());
        self.tape.custom(
            &[self, col],
            y,
            Box::new(move |g, sink| {
                if sink.wants(px) {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(cols).enumerate() {
                        let s = c.data()[i];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    sink.accumulate(px, gx);
                }
                if sink.wants(pc) {
                    let acc = g
                        .data()
                        .chunks(cols)
                        .zip(x.data().chunks(cols))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    sink.accumulate(pc, Tensor::new(c.shape().to_vec(), acc));
                }
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn inverse_sigmoid(x: f64, eps: f64) -> f64 {
    let x = x.clamp(eps, 1.0 - eps);
    (x / (1.0 - x)).ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
