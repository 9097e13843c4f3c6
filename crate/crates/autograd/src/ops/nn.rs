//! Fused neural-network kernels: layer norm, row softmax, masked attention.

use std::sync::Arc;

use smallvec::SmallVec;

use crate::{Tensor, Var};

/// Allowed-key structure for attention, stored as per-query key intervals.
///
/// Block-structured masks (query groups, denoising groups) have one interval
/// per row, so attention cost scales with the allowed pairs only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpanMask {
    keys: usize,
    rows: Vec<SmallVec<[(usize, usize); 2]>>,
}

impl SpanMask {
    /// Every query may attend to every key.
    pub fn full(queries: usize, keys: usize) -> Self {
        Self {
            keys,
            rows: vec![SmallVec::from_elem((0, keys), 1); queries],
        }
    }

    /// Builds from a predicate where `blocked(i, j) == true` forbids query `i`
    /// from attending to key `j`.
    pub fn from_blocked(queries: usize, keys: usize, blocked: impl Fn(usize, usize) -> bool) -> Self {
        let rows = (0..queries)
            .map(|i| {
                let mut spans = SmallVec::new();
                let mut start = None;
                for j in 0..keys {
                    match (blocked(i, j), start) {
                        (false, None) => start = Some(j),
                        (true, Some(s)) => {
                            spans.push((s, j));
                            start = None;
                        }
                        _ => {}
                    }
                }
                if let Some(s) = start {
                    spans.push((s, keys));
                }
                spans
            })
            .collect();
        Self { keys, rows }
    }

    pub fn queries(&self) -> usize {
        self.rows.len()
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.rows[i].iter().any(|&(lo, hi)| lo <= j && j < hi)
    }

    pub fn spans(&self, i: usize) -> &[(usize, usize)] {
        &self.rows[i]
    }

    fn key_iter(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.rows[i].iter().flat_map(|&(lo, hi)| lo..hi)
    }

    fn count(&self, i: usize) -> usize {
        self.rows[i].iter().map(|&(lo, hi)| hi - lo).sum()
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl<'t> Var<'t> {
    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        let gv = gamma.value();
        let bv = beta.value();
        assert_eq!(gv.numel(), cols);
        assert_eq!(bv.numel(), cols);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                y[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let (px, pg, pb) = (self.node(), gamma.node(), beta.node());
        self.tape.custom(
            &[self, gamma, beta],
            Tensor::new(x.shape().to_vec(), y),
            Box::new(move |g, sink| {
                if let Some(buf) = sink.buffer(pg) {
                    let d = buf.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            d[c] += g.data()[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(buf) = sink.buffer(pb) {
                    let d = buf.data_mut();
                    for row in g.data().chunks(cols) {
                        for (a, v) in d.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
                if let Some(buf) = sink.buffer(px) {
                    let d = buf.data_mut();
                    let n = cols as f64;
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gr[c] * gv.data()[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..cols {
                            let dh = gr[c] * gv.data()[c];
                            d[r * cols + c] += inv_std[r] * (dh - sum_dh / n - hr[c] * sum_dh_h / n);
                        }
                    }
                }
            }),
        )
    }

    /// Softmax over each row (last dimension).
    pub fn softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let cols = x.cols();
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        let y = Arc::new(y);
        let yc = y.clone();
        let px = self.node();
        self.tape.custom_shared(
            &[self],
            y,
            Box::new(move |g, sink| {
                if let Some(buf) = sink.buffer(px) {
                    for ((d, yr), gr) in buf
                        .data_mut()
                        .chunks_mut(cols)
                        .zip(yc.data().chunks(cols))
                        .zip(g.data().chunks(cols))
                    {
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            d[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }),
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self` holds queries `[Tq, D]`; `key`/`value` are `[Tk, D]`. `D` is
    /// split evenly across `heads`. With a mask, query `i` only attends to
    /// the keys its spans allow; a query with no allowed key outputs zeros.
    pub fn attention(self, key: Var<'t>, value: Var<'t>, heads: usize, mask: Option<Arc<SpanMask>>) -> Var<'t> {
        let q = self.value();
        let k = key.value();
        let v = value.value();
        let (tq, d) = (q.rows(), q.cols());
        let tk = k.rows();
        assert_eq!(k.cols(), d, "key width");
        assert_eq!(v.rows(), tk, "value length");
        assert_eq!(v.cols(), d, "value width");
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let mask = mask.unwrap_or_else(|| Arc::new(SpanMask::full(tq, tk)));
        assert_eq!(mask.queries(), tq, "mask rows");
        assert_eq!(mask.keys(), tk, "mask cols");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // probs laid out per query: [head][allowed key]
        let mut offsets = Vec::with_capacity(tq + 1);
        offsets.push(0);
        for i in 0..tq {
            offsets.push(offsets[i] + heads * mask.count(i));
        }
        let mut probs = vec![0.0; offsets[tq]];
        let mut out = vec![0.0; tq * d];
        let mut keys_buf = Vec::new();
        for i in 0..tq {
            keys_buf.clear();
            keys_buf.extend(mask.key_iter(i));
            let n = keys_buf.len();
            if n == 0 {
                continue;
            }
            for h in 0..heads {
                let qi = &q.data()[i * d + h * dh..i * d + (h + 1) * dh];
                let p = &mut probs[offsets[i] + h * n..offsets[i] + (h + 1) * n];
                for (slot, &j) in p.iter_mut().zip(&keys_buf) {
                    *slot = scale * dot(qi, &k.data()[j * d + h * dh..j * d + (h + 1) * dh]);
                }
                softmax_in_place(p);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (&pj, &j) in p.iter().zip(&keys_buf) {
                    let vj = &v.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    for (a, b) in o.iter_mut().zip(vj) {
                        *a += pj * b;
                    }
                }
            }
        }

        let (pq, pk, pv) = (self.node(), key.node(), value.node());
        self.tape.custom(
            &[self, key, value],
            Tensor::new([tq, d], out),
            Box::new(move |g, sink| {
                let mut gq = vec![0.0; tq * d];
                let mut gk = vec![0.0; tk * d];
                let mut gv = vec![0.0; tk * d];
                let mut keys_buf = Vec::new();
                let mut ds = Vec::new();
                for i in 0..tq {
                    keys_buf.clear();
                    keys_buf.extend(mask.key_iter(i));
                    let n = keys_buf.len();
                    if n == 0 {
                        continue;
                    }
                    for h in 0..heads {
                        let lo = i * d + h * dh;
                        let go = &g.data()[lo..lo + dh];
                        let qi = &q.data()[lo..lo + dh];
                        let p = &probs[offsets[i] + h * n..offsets[i] + (h + 1) * n];
                        ds.clear();
                        let mut weighted = 0.0;
                        for (&pj, &j) in p.iter().zip(&keys_buf) {
                            let jo = j * d + h * dh;
                            let dp = dot(go, &v.data()[jo..jo + dh]);
                            weighted += pj * dp;
                            ds.push(dp);
                            for (a, b) in gv[jo..jo + dh].iter_mut().zip(go) {
                                *a += pj * b;
                            }
                        }
                        for ((&pj, &j), dp) in p.iter().zip(&keys_buf).zip(ds.iter()) {
                            let s = scale * pj * (dp - weighted);
                            if s == 0.0 {
                                continue;
                            }
                            let jo = j * d + h * dh;
                            let kj = &k.data()[jo..jo + dh];
                            for (a, b) in gq[lo..lo + dh].iter_mut().zip(kj) {
                                *a += s * b;
                            }
                            for (a, b) in gk[jo..jo + dh].iter_mut().zip(qi) {
                                *a += s * b;
                            }
                        }
                    }
                }
                sink.accumulate(pq, Tensor::new([tq, d], gq));
                sink.accumulate(pk, Tensor::new([tk, d], gk));
                sink.accumulate(pv, Tensor::new([tk, d], gv));
            }),
        )
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return;
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
