//! Multi-scale deformable attention kernel.
//!
//! Each query samples `points` locations per head and per level around its
//! reference box and mixes the bilinear samples with normalized weights.
//! Sampling follows the half-pixel convention: normalized `x` maps to pixel
//! coordinate `x * W - 0.5`, and taps outside the map read zero.

use std::sync::Arc;

use gdetr_autograd::{Tensor, Var};

/// Placement of one pyramid level inside the flattened value tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelShape {
    pub height: usize,
    pub width: usize,
    /// First row of this level in the `[cells, C]` value matrix.
    pub start: usize,
}

/// Shapes for consecutive levels stored back to back.
pub fn level_shapes(dims: &[(usize, usize)]) -> Vec<LevelShape> {
    let mut start = 0;
    dims.iter()
        .map(|&(height, width)| {
            let s = LevelShape { height, width, start };
            start += height * width;
            s
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformLayout {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformLayout {
    pub fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    pub fn slot(&self, h: usize, l: usize, p: usize) -> usize {
        (h * self.levels + l) * self.points + p
    }
}

/// One bilinear tap: flat value row and its interpolation weight, plus the
/// weight derivatives with respect to the pixel coordinates.
#[derive(Clone, Copy)]
struct Tap {
    row: usize,
    w: f64,
    dwx: f64,
    dwy: f64,
}

fn taps(shape: LevelShape, x: f64, y: f64, out: &mut Vec<Tap>) {
    out.clear();
    let px = x * shape.width as f64 - 0.5;
    let py = y * shape.height as f64 - 0.5;
    let (x0, y0) = (px.floor(), py.floor());
    let (fx, fy) = (px - x0, py - y0);
    for (dy, wy, dwy) in [(0.0, 1.0 - fy, -1.0), (1.0, fy, 1.0)] {
        let yy = y0 + dy;
        if yy < 0.0 || yy >= shape.height as f64 {
            continue;
        }
        for (dx, wx, dwx) in [(0.0, 1.0 - fx, -1.0), (1.0, fx, 1.0)] {
            let xx = x0 + dx;
            if xx < 0.0 || xx >= shape.width as f64 {
                continue;
            }
            out.push(Tap {
                row: shape.start + yy as usize * shape.width + xx as usize,
                w: wx * wy,
                dwx: dwx * wy,
                dwy: wx * dwy,
            });
        }
    }
}

/// Sampling location of `(query, head, level, point)` in normalized coordinates.
fn location(refs: &[f64], off: &[f64], layout: DeformLayout) -> (f64, f64) {
    let p = layout.points as f64;
    (refs[0] + off[0] / p * refs[2] * 0.5, refs[1] + off[1] / p * refs[3] * 0.5)
}

/// Deformable cross-attention.
///
/// * `value`: `[cells, C]`, levels stacked per `shapes`.
/// * `refs`: `[Q, 4]` reference boxes `(cx, cy, w, h)`, treated as constants.
/// * `offsets`: `[Q, slots * 2]` raw offsets in units of `w / (2 * points)`.
/// * `weights`: `[Q, slots]`, already normalized per head.
///
/// Returns `[Q, C]`; head `h` fills channels `h*C/H..(h+1)*C/H`.
pub fn deform_attn<'t>(
    value: Var<'t>,
    shapes: Arc<Vec<LevelShape>>,
    refs: Arc<Tensor>,
    offsets: Var<'t>,
    weights: Var<'t>,
    layout: DeformLayout,
) -> Var<'t> {
    let v = value.value();
    let off = offsets.value();
    let att = weights.value();
    let (q, c) = (refs.rows(), v.cols());
    let slots = layout.slots();
    assert_eq!(shapes.len(), layout.levels, "level count");
    assert_eq!(
        v.rows(),
        shapes.iter().map(|s| s.height * s.width).sum::<usize>(),
        "value rows"
    );
    assert_eq!(refs.cols(), 4, "reference boxes");
    assert_eq!(off.shape(), [q, slots * 2], "offset shape");
    assert_eq!(att.shape(), [q, slots], "weight shape");
    assert!(c % layout.heads == 0, "channels {c} not divisible by {} heads", layout.heads);
    let dh = c / layout.heads;

    let mut out = vec![0.0; q * c];
    let mut buf = Vec::with_capacity(4);
    for qi in 0..q {
        let r = refs.row(qi);
        for h in 0..layout.heads {
            let o = &mut out[qi * c + h * dh..qi * c + (h + 1) * dh];
            for (l, &shape) in shapes.iter().enumerate() {
                for p in 0..layout.points {
                    let s = layout.slot(h, l, p);
                    let a = att.data()[qi * slots + s];
                    let (x, y) = location(r, &off.data()[(qi * slots + s) * 2..], layout);
                    taps(shape, x, y, &mut buf);
                    for t in &buf {
                        let src = &v.data()[t.row * c + h * dh..t.row * c + (h + 1) * dh];
                        for (a_, b) in o.iter_mut().zip(src) {
                            *a_ += a * t.w * b;
                        }
                    }
                }
            }
        }
    }

    let (pv, po, pw) = (value.node(), offsets.node(), weights.node());
    value.tape().custom(
        &[value, offsets, weights],
        Tensor::new([q, c], out),
        Box::new(move |g, sink| {
            let mut gv = sink.wants(pv).then(|| vec![0.0; v.numel()]);
            let mut go = vec![0.0; off.numel()];
            let mut gw = vec![0.0; att.numel()];
            let mut buf = Vec::with_capacity(4);
            for qi in 0..q {
                let r = refs.row(qi);
                for h in 0..layout.heads {
                    let gq = &g.data()[qi * c + h * dh..qi * c + (h + 1) * dh];
                    for (l, &shape) in shapes.iter().enumerate() {
                        for p in 0..layout.points {
                            let s = layout.slot(h, l, p);
                            let a = att.data()[qi * slots + s];
                            let oi = (qi * slots + s) * 2;
                            let (x, y) = location(r, &off.data()[oi..], layout);
                            taps(shape, x, y, &mut buf);
                            let (mut ds, mut dsx, mut dsy) = (0.0, 0.0, 0.0);
                            for t in &buf {
                                let src = &v.data()[t.row * c + h * dh..t.row * c + (h + 1) * dh];
                                let d: f64 = gq.iter().zip(src).map(|(x, y)| x * y).sum();
                                ds += t.w * d;
                                dsx += t.dwx * d;
                                dsy += t.dwy * d;
                                if let Some(gv) = gv.as_mut() {
                                    let dst = &mut gv[t.row * c + h * dh..t.row * c + (h + 1) * dh];
                                    for (x, y) in dst.iter_mut().zip(gq) {
                                        *x += a * t.w * y;
                                    }
                                }
                            }
                            gw[qi * slots + s] = ds;
                            // d(pixel)/d(offset) = size * extent * 0.5 / points
                            let pts = layout.points as f64;
                            go[oi] = a * dsx * shape.width as f64 * r[2] * 0.5 / pts;
                            go[oi + 1] = a * dsy * shape.height as f64 * r[3] * 0.5 / pts;
                        }
                    }
                }
            }
            if let Some(gv) = gv {
                sink.accumulate(pv, Tensor::new(v.shape().to_vec(), gv));
            }
            sink.accumulate(po, Tensor::new(off.shape().to_vec(), go));
            sink.accumulate(pw, Tensor::new(att.shape().to_vec(), gw));
        }),
    )
}

/// Plain bilinear sample of one level at a normalized point (zero outside).
pub fn bilinear_sample(value: &Tensor, shape: LevelShape, x: f64, y: f64) -> Vec<f64> {
    let c = value.cols();
    let mut out = vec![0.0; c];
    let mut buf = Vec::with_capacity(4);
    taps(shape, x, y, &mut buf);
    for t in &buf {
        for (o, v) in out.iter_mut().zip(value.row(t.row)) {
            *o += t.w * v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use gdetr_autograd::gradcheck::check_gradients;
    use gdetr_autograd::Tape;

    #[test]
    fn constant_field_is_reproduced() {
        let tape = Tape::new();
        let shapes = Arc::new(level_shapes(&[(3, 3), (2, 2)]));
        let layout = DeformLayout {
            heads: 2,
            levels: 2,
            points: 2,
        };
        let value = tape.constant(Tensor::from_fn([13, 4], |i| [1.0, 2.0, -3.0, 0.5][i % 4]));
        let refs = Arc::new(Tensor::new([1, 4], vec![0.5, 0.5, 0.2, 0.2]));
        let off = tape.constant(Tensor::from_fn([1, 16], |i| (i as f64 * 0.37).sin()));
        // weights sum to one per head
        let w = tape.constant(Tensor::full([1, 8], 0.25));
        let out = deform_attn(value, shapes, refs, off, w, layout).value();
        for (o, e) in out.data().iter().zip([1.0, 2.0, -3.0, 0.5]) {
            assert!((o - e).abs() < 1e-12, "{o} vs {e}");
        }
    }

    #[test]
    fn one_hot_weight_picks_single_sample() {
        let tape = Tape::new();
        let shapes = Arc::new(level_shapes(&[(3, 3)]));
        let layout = DeformLayout {
            heads: 1,
            levels: 1,
            points: 2,
        };
        let vt = Tensor::from_fn([9, 2], |i| i as f64 * 0.3 - 1.0);
        let refs = Arc::new(Tensor::new([1, 4], vec![0.4, 0.6, 0.3, 0.2]));
        let offv = Tensor::new([1, 4], vec![0.5, -1.0, 2.0, 3.0]);
        let out = deform_attn(
            tape.constant(vt.clone()),
            shapes.clone(),
            refs,
            tape.constant(offv),
            tape.constant(Tensor::new([1, 2], vec![0.0, 1.0])),
            layout,
        )
        .value();
        let (x, y) = (0.4 + 2.0 / 2.0 * 0.3 * 0.5, 0.6 + 3.0 / 2.0 * 0.2 * 0.5);
        let expect = bilinear_sample(&vt, shapes[0], x, y);
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_reads_zero() {
        let shape = LevelShape {
            height: 2,
            width: 2,
            start: 0,
        };
        let v = Tensor::ones([4, 1]);
        assert_eq!(bilinear_sample(&v, shape, 1.5, 0.5), vec![0.0]);
        // pixel coordinate -0.5 + 0.25: half the tap falls outside
        let s = bilinear_sample(&v, shape, 0.0, 0.5);
        assert!((s[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shapes = Arc::new(level_shapes(&[(3, 3), (2, 2)]));
        let layout = DeformLayout {
            heads: 2,
            levels: 2,
            points: 2,
        };
        let refs = Arc::new(Tensor::new([2, 4], vec![0.45, 0.55, 0.3, 0.4, 0.2, 0.7, 0.5, 0.25]));
        let inputs = [
            Tensor::from_fn([13, 4], |i| ((i * 7 % 11) as f64 * 0.41).sin()),
            // keep samples off the integer pixel grid where bilinear is not differentiable
            Tensor::from_fn([2, 16], |i| 0.13 + (i as f64 * 1.3).cos() * 0.9),
            Tensor::from_fn([2, 8], |i| 0.1 + (i as f64 * 0.7).sin().abs()),
        ];
        let checks = check_gradients(&inputs, 1e-6, |t, v| {
            let out = deform_attn(v[0], shapes.clone(), refs.clone(), v[1], v[2], layout);
            let probe = t.constant(Tensor::from_fn([2, 4], |i| (i as f64 * 0.9).cos()));
            out.mul(probe).sum()
        });
        for (i, c) in checks.iter().enumerate() {
            assert!(c.relative_error() < 1e-6, "input {i}: {}", c.relative_error());
        }
    }
}
