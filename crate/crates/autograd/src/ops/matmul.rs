//! Matrix products backed by `matrixmultiply`.

use crate::{Tensor, Var};

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
///
/// `a` is `m x k` after optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Row-major strides, swapped for the transposed views.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked above against the strides used.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    /// `[m, k] x [k, n] -> [m, n]`; leading dims of `self` are flattened into rows.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.linear_impl(other, None)
    }

    /// `x * w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        self.linear_impl(weight, bias)
    }

    fn linear_impl(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (m, k) = (x.rows(), x.cols());
        assert_eq!(w.shape().len(), 2, "weight must be 2-d");
        assert_eq!(w.shape()[0], k, "inner dims {k} vs {:?}", w.shape());
        let n = w.shape()[1];
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            let bv = b.value();
            assert_eq!(bv.numel(), n, "bias width mismatch");
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(m, k, n, x.data(), false, w.data(), false, 1.0, &mut out);
        let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
        shape.push(n);

        let (px, pw) = (self.node(), weight.node());
        let pb = bias.map(|b| b.node());
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.tape.custom(
            &parents,
            Tensor::new(shape, out),
            Box::new(move |g, sink| {
                if let Some(gx) = sink.buffer(px) {
                    // dx = g * w^T
                    gemm(m, n, k, g.data(), false, w.data(), true, 1.0, gx.data_mut());
                }
                if let Some(gw) = sink.buffer(pw) {
                    // dw = x^T * g
                    gemm(k, m, n, x.data(), true, g.data(), false, 1.0, gw.data_mut());
                }
                if let Some(pb) = pb {
                    if let Some(gb) = sink.buffer(pb) {
                        for row in g.data().chunks(n) {
                            for (a, v) in gb.data_mut().iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
