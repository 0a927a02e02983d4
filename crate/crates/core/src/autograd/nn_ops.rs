//! Fused neural-network operations: normalisation, softmax, losses, resampling.

use std::rc::Rc;

use super::Var;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-sparse linear map over the leading axis, used for pooling and
/// spatial resampling of `[h*w, C]` feature maps.
#[derive(Clone, Debug)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<T>,
}

impl<T: Scalar> SparseMatrix<T> {
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, T)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for &(c, v) in row {
                assert!(c < cols);
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self { rows: rows.len(), cols, row_ptr, col_idx, vals }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn bilinear(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let taps = |inp: usize, out: usize, o: usize| -> [(usize, f64); 2] {
            let scale = inp as f64 / out as f64;
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(inp - 1);
            let i1 = (i0 + 1).min(inp - 1);
            let l = src - i0 as f64;
            [(i0, 1.0 - l), (i1, l)]
        };
        let mut rows = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let ty = taps(in_h, out_h, oy);
            for ox in 0..out_w {
                let tx = taps(in_w, out_w, ox);
                let mut row: Vec<(usize, T)> = Vec::with_capacity(4);
                for &(y, wy) in &ty {
                    for &(x, wx) in &tx {
                        let w = wy * wx;
                        if w == 0.0 {
                            continue;
                        }
                        let col = y * in_w + x;
                        match row.iter_mut().find(|(c, _)| *c == col) {
                            Some(e) => e.1 += T::from_f64_lossy(w),
                            None => row.push((col, T::from_f64_lossy(w))),
                        }
                    }
                }
                rows.push(row);
            }
        }
        Self::from_rows(in_h * in_w, rows)
    }

    /// Nearest-neighbour resize (`floor(dst * in / out)`).
    pub fn nearest(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let mut rows = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let y = ((oy * in_h) / out_h).min(in_h - 1);
            for ox in 0..out_w {
                let x = ((ox * in_w) / out_w).min(in_w - 1);
                rows.push(vec![(y * in_w + x, T::one())]);
            }
        }
        Self::from_rows(in_h * in_w, rows)
    }

    /// Adaptive average pooling into an `out_h x out_w` grid of bins.
    pub fn adaptive_avg_pool(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let bins = |inp: usize, out: usize, o: usize| {
            let start = (o * inp) / out;
            let end = ((o + 1) * inp).div_ceil(out);
            start..end.max(start + 1)
        };
        let mut rows = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let ry = bins(in_h, out_h, oy);
            for ox in 0..out_w {
                let rx = bins(in_w, out_w, ox);
                let count = (ry.len() * rx.len()) as f64;
                let w = T::from_f64_lossy(1.0 / count);
                let row = ry.clone().flat_map(|y| rx.clone().map(move |x| (y * in_w + x, w))).collect();
                rows.push(row);
            }
        }
        Self::from_rows(in_h * in_w, rows)
    }

    /// Plain (non-recorded) application to a `[cols, C]` tensor.
    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.dim(0), self.cols, "resample expects {} rows, got {:?}", self.cols, x.shape());
        let ch = x.len() / self.cols.max(1);
        let mut out = vec![T::zero(); self.rows * ch];
        for r in 0..self.rows {
            let dst = &mut out[r * ch..(r + 1) * ch];
            for (col, w) in self.row(r) {
                for (o, &v) in dst.iter_mut().zip(&x.data()[col * ch..(col + 1) * ch]) {
                    *o += w * v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = self.rows;
        Tensor::from_vec(shape, out)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn normalize_last(self, eps: T) -> Self {
        let x = self.value();
        let n = *x.shape().last().expect("normalize_last on scalar");
        let nf = T::from_usize_lossy(n);
        let rows = x.len() / n;
        let mut out = Vec::with_capacity(x.len());
        let mut rstd = Vec::with_capacity(rows);
        for row in x.data().chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        self.g.push_op(
            Tensor::from_vec(x.shape(), out),
            &[self.id],
            Box::new(move |ctx, g| {
                let y = ctx.output();
                let mut d = Vec::with_capacity(y.len());
                for ((gr, yr), &r) in g.data().chunks_exact(n).zip(y.data().chunks_exact(n)).zip(&rstd) {
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| r * (gv - mg - yv * mgy)));
                }
                vec![Some(Tensor::from_vec(y.shape(), d))]
            }),
        )
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero weight.
    pub fn softmax_last(self) -> Self {
        let x = self.value();
        let y = softmax_rows(&x);
        let n = *x.shape().last().unwrap();
        self.g.push_op(
            y,
            &[self.id],
            Box::new(move |ctx, g| {
                let y = ctx.output();
                let mut d = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks_exact(n).zip(y.data().chunks_exact(n)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                    d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::from_vec(y.shape(), d))]
            }),
        )
    }

    pub fn log_softmax_last(self) -> Self {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(n) {
            let lse = logsumexp(row);
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.g.push_op(
            Tensor::from_vec(x.shape(), out),
            &[self.id],
            Box::new(move |ctx, g| {
                let y = ctx.output();
                let mut d = Vec::with_capacity(y.len());
                for (gr, yr) in g.data().chunks_exact(n).zip(y.data().chunks_exact(n)) {
                    let s = gr.iter().copied().sum::<T>();
                    d.extend(gr.iter().zip(yr).map(|(&gv, &yv)| gv - yv.exp() * s));
                }
                vec![Some(Tensor::from_vec(y.shape(), d))]
            }),
        )
    }

    /// Mean token cross-entropy of `[M, C]` logits against class targets;
    /// `None` targets are ignored. Returns 0 when every target is ignored.
    pub fn cross_entropy(self, targets: Rc<Vec<Option<usize>>>) -> Self {
        let x = self.value();
        assert_eq!(x.rank(), 2, "cross_entropy expects [M, C] logits");
        let (m, n) = (x.dim(0), x.dim(1));
        assert_eq!(targets.len(), m, "cross_entropy target count");
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, t) in x.data().chunks_exact(n).zip(targets.iter()) {
            if let Some(t) = *t {
                assert!(t < n, "target {t} out of {n} classes");
                total += logsumexp(row) - row[t];
                count += 1;
            }
        }
        let denom = T::from_usize_lossy(count.max(1));
        self.g.push_op(
            Tensor::scalar(total / denom),
            &[self.id],
            Box::new(move |ctx, g| {
                let x = ctx.input(0);
                let scale = g.item() / denom;
                let mut d = vec![T::zero(); x.len()];
                for ((row, dr), t) in x.data().chunks_exact(n).zip(d.chunks_exact_mut(n)).zip(targets.iter()) {
                    let Some(t) = *t else { continue };
                    let lse = logsumexp(row);
                    for (o, &v) in dr.iter_mut().zip(row) {
                        *o = (v - lse).exp() * scale;
                    }
                    dr[t] -= scale;
                }
                vec![Some(Tensor::from_vec(x.shape(), d))]
            }),
        )
    }

    /// Applies a row-sparse map along axis 0.
    pub fn resample(self, map: Rc<SparseMatrix<T>>) -> Self {
        let x = self.value();
        let y = map.apply(&x);
        self.g.push_op(
            y,
            &[self.id],
            Box::new(move |ctx, g| {
                let x = ctx.input(0);
                let ch = x.len() / map.cols().max(1);
                let mut d = vec![T::zero(); x.len()];
                for r in 0..map.rows() {
                    let src = &g.data()[r * ch..(r + 1) * ch];
                    for (col, w) in map.row(r) {
                        for (o, &v) in d[col * ch..(col + 1) * ch].iter_mut().zip(src) {
                            *o += w * v;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(x.shape(), d))]
            }),
        )
    }
}

pub(crate) fn logsumexp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Softmax over the last axis of a plain tensor.
pub(crate) fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("softmax on scalar");
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= sum;
        }
    }
    Tensor::from_vec(x.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn fused_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_t(&mut rng, &[4, 6]);
        let w = rand_t(&mut rng, &[4, 6]);
        let targets = Rc::new(vec![Some(1), None, Some(5), Some(0)]);
        let map = Rc::new(SparseMatrix::<f64>::bilinear(2, 2, 3, 3));
        let report = check_gradients(&[x], 1e-5, |g, v| {
            let wv = g.constant(w.clone());
            let a = v[0].normalize_last(1e-5).mul(wv).softmax_last().mul(wv).sum();
            let b = v[0].log_softmax_last().mul(wv).sum();
            let ce = v[0].scale(0.7).cross_entropy(targets.clone());
            let r = v[0].resample(map.clone()).tanh().sum();
            a.add(b).add(ce).add(r)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn cross_entropy_ignores_everything() {
        let g = crate::autograd::Graph::<f64>::standalone();
        let x = g.leaf(Tensor::zeros([2, 3]));
        let l = x.cross_entropy(Rc::new(vec![None, None]));
        assert_eq!(l.item(), 0.0);
        let grads = g.backward(l);
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resample_maps_have_unit_row_sums() {
        for m in [
            SparseMatrix::<f64>::bilinear(4, 4, 16, 16),
            SparseMatrix::bilinear(3, 5, 2, 7),
            SparseMatrix::nearest(2, 2, 8, 8),
            SparseMatrix::adaptive_avg_pool(2, 2, 6, 6),
            SparseMatrix::adaptive_avg_pool(7, 5, 3, 2),
        ] {
            for r in 0..m.rows() {
                let s: f64 = m.row(r).map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_masks_negative_infinity() {
        let x = Tensor::from_vec([1, 3], vec![0.0f64, f64::NEG_INFINITY, 1.0]);
        let y = softmax_rows(&x);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.sum() - 1.0).abs() < 1e-15);
    }
}
