//! Reshaping, slicing, gathering and reductions.

use std::sync::Arc;

use crate::{Tape, Tensor, Var};

/// Marks an output element of [`Var::remap`] that reads as zero.
pub const ZERO: usize = usize::MAX;

impl<'t> Var<'t> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let x = self.value();
        assert_eq!(shape.iter().product::<usize>(), x.numel(), "reshape size mismatch");
        let px = self.node();
        self.tape.custom(
            &[self],
            (*x).clone().reshape(shape),
            Box::new(move |g, sink| sink.accumulate(px, g.clone())),
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let px = self.node();
        let shape = x.shape().to_vec();
        self.tape.custom(
            &[self],
            Tensor::scalar(x.sum()),
            Box::new(move |g, sink| sink.accumulate(px, Tensor::full(shape.clone(), g.item()))),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row sums: `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let y = x.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let px = self.node();
        let shape = x.shape().to_vec();
        self.tape.custom(
            &[self],
            Tensor::new([rows, 1], y),
            Box::new(move |g, sink| {
                let data = (0..rows * cols).map(|i| g.data()[i / cols]).collect();
                sink.accumulate(px, Tensor::new(shape.clone(), data));
            }),
        )
    }

    /// Rows `lo..hi` of a matrix view.
    pub fn slice_rows(self, lo: usize, hi: usize) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        assert!(lo <= hi && hi <= rows, "row slice {lo}..{hi} of {rows}");
        let y = Tensor::new([hi - lo, cols], x.data()[lo * cols..hi * cols].to_vec());
        let px = self.node();
        self.tape.custom(
            &[self],
            y,
            Box::new(move |g, sink| {
                if let Some(buf) = sink.buffer(px) {
                    for (a, v) in buf.data_mut()[lo * cols..hi * cols].iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }),
        )
    }

    /// Columns `lo..hi` of a matrix view.
    pub fn slice_cols(self, lo: usize, hi: usize) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        assert!(lo <= hi && hi <= cols, "col slice {lo}..{hi} of {cols}");
        let w = hi - lo;
        let mut y = Vec::with_capacity(rows * w);
        for r in x.data().chunks(cols) {
            y.extend_from_slice(&r[lo..hi]);
        }
        let px = self.node();
        self.tape.custom(
            &[self],
            Tensor::new([rows, w], y),
            Box::new(move |g, sink| {
                if let Some(buf) = sink.buffer(px) {
                    for (dst, src) in buf.data_mut().chunks_mut(cols).zip(g.data().chunks(w)) {
                        for (a, v) in dst[lo..hi].iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
            }),
        )
    }

    /// Selects rows by index (indices may repeat); backward scatter-adds.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let mut y = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            assert!(i < rows, "gather index {i} out of {rows} rows");
            y.extend_from_slice(x.row(i));
        }
        let px = self.node();
        let idx = indices.to_vec();
        self.tape.custom(
            &[self],
            Tensor::new([indices.len(), cols], y),
            Box::new(move |g, sink| {
                if let Some(buf) = sink.buffer(px) {
                    for (k, &i) in idx.iter().enumerate() {
                        let src = g.row(k);
                        for (a, v) in buf.row_mut(i).iter_mut().zip(src) {
                            *a += v;
                        }
                    }
                }
            }),
        )
    }

    /// General element permutation: `out[i] = x[map[i]]`, or 0 where `map[i] == ZERO`.
    ///
    /// Covers pixel shuffles, padding and flips.
    pub fn remap(self, shape: impl Into<Vec<usize>>, map: Arc<Vec<usize>>) -> Var<'t> {
        let shape = shape.into();
        let x = self.value();
        assert_eq!(shape.iter().product::<usize>(), map.len(), "remap shape mismatch");
        let y = map.iter().map(|&i| if i == ZERO { 0.0 } else { x.data()[i] }).collect();
        let px = self.node();
        self.tape.custom(
            &[self],
            Tensor::new(shape, y),
            Box::new(move |g, sink| {
                if let Some(buf) = sink.buffer(px) {
                    let d = buf.data_mut();
                    for (&i, v) in map.iter().zip(g.data()) {
                        if i != ZERO {
                            d[i] += v;
                        }
                    }
                }
            }),
        )
    }
}

impl Tape {
    /// Stacks matrices with equal column counts.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for v in &values {
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            spans.push((data.len(), data.len() + v.numel()));
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let ids: Vec<_> = parts.iter().map(|p| p.node()).collect();
        self.custom(
            parts,
            Tensor::new([rows, cols], data),
            Box::new(move |g, sink| {
                for (&id, &(lo, hi)) in ids.iter().zip(&spans) {
                    if let Some(buf) = sink.buffer(id) {
                        for (a, v) in buf.data_mut().iter_mut().zip(&g.data()[lo..hi]) {
                            *a += v;
                        }
                    }
                }
            }),
        )
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                assert_eq!(v.rows(), rows, "concat_cols height mismatch");
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<_> = parts.iter().map(|p| p.node()).collect();
        self.custom(
            parts,
            Tensor::new([rows, total], data),
            Box::new(move |g, sink| {
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    if let Some(buf) = sink.buffer(id) {
                        for r in 0..rows {
                            let src = &g.data()[r * total + off..r * total + off + w];
                            for (a, v) in buf.row_mut(r).iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                    off += w;
                }
            }),
        )
    }
}
