//! Elementwise, linear-algebra and shape operations on [`Var`].

use std::rc::Rc;

use super::{BackwardCtx, Var};
use crate::scalar::{c, Scalar};
use crate::tensor::{permute_data, Tensor};

/// Logical matrix over row-major storage, optionally transposed.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T> View<'a, T> {
    /// `stored` is `[r, c]` row-major; `transpose` exposes it as `[c, r]`.
    fn new(data: &'a [T], r: usize, cc: usize, transpose: bool) -> Self {
        if transpose {
            View { data, rows: cc, cols: r, rs: 1, cs: cc as isize }
        } else {
            View { data, rows: r, cols: cc, rs: cc as isize, cs: 1 }
        }
    }

    fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `out (row-major [a.rows, b.cols]) += a @ b`.
fn gemm_acc<T: Scalar>(a: View<'_, T>, b: View<'_, T>, out: &mut [T]) {
    debug_assert_eq!(a.cols, b.rows);
    let n = b.cols;
    T::gemm(a.rows, a.cols, n, T::one(), a.data, a.rs, a.cs, b.data, b.rs, b.cs, T::one(), out, n as isize, 1);
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

/// Sums `g` (shape of the broadcast result) down to `len` trailing elements.
fn reduce_to<T: Scalar>(g: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for chunk in g.chunks_exact(len) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Self {
        let x = self.value();
        let y = x.map(&f);
        self.g.push_op(
            y,
            &[self.id],
            Box::new(move |ctx: &BackwardCtx<'_, T>, g: &Tensor<T>| {
                let x = ctx.input(0).data();
                let y = ctx.output().data();
                let data = g.data().iter().zip(x.iter().zip(y)).map(|(&g, (&x, &y))| g * df(x, y)).collect();
                vec![Some(Tensor::from_vec(g.shape(), data))]
            }),
        )
    }

    pub fn neg(self) -> Self {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: T) -> Self {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Self {
        self.unary(move |x| x + s, |_, _| T::one())
    }

    pub fn exp(self) -> Self {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Self {
        self.unary(|x| x.ln(), |x, _| x.recip())
    }

    pub fn tanh(self) -> Self {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(self) -> Self {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(self) -> Self {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Self {
        self.unary(
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `log(sigmoid(x))`, computed without overflow for large |x|.
    pub fn log_sigmoid(self) -> Self {
        self.unary(log_sigmoid, |x, _| sigmoid(-x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Self {
        self.unary(gelu, gelu_grad)
    }

    /// Copy of the value with no gradient path back to `self`.
    pub fn detach(self) -> Self {
        let v = (*self.value()).clone();
        self.g.constant(v)
    }

    fn broadcast(
        self,
        rhs: Self,
        f: impl Fn(T, T) -> T,
        backward: impl Fn(&BackwardCtx<'_, T>, &Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Self {
        let (a, b) = (self.value(), rhs.value());
        assert!(
            is_suffix(b.shape(), a.shape()),
            "rhs shape {:?} must equal or be a suffix of lhs shape {:?}",
            b.shape(),
            a.shape()
        );
        let m = b.len().max(1);
        let bd = b.data();
        let data = a.data().chunks(m).flat_map(|ch| ch.iter().zip(bd).map(|(&x, &y)| f(x, y))).collect();
        let out = Tensor::from_vec(a.shape(), data);
        self.g.push_op(out, &[self.id, rhs.id], Box::new(backward))
    }

    /// `self + rhs`; `rhs` may be a trailing-shape broadcast (bias rows etc.).
    pub fn add(self, rhs: Self) -> Self {
        self.broadcast(
            rhs,
            |x, y| x + y,
            |ctx, g| {
                let gb = ctx.needs(1).then(|| {
                    let b = ctx.input(1);
                    Tensor::from_vec(b.shape(), reduce_to(g.data(), b.len()))
                });
                vec![Some(g.clone()), gb]
            },
        )
    }

    pub fn sub(self, rhs: Self) -> Self {
        self.broadcast(
            rhs,
            |x, y| x - y,
            |ctx, g| {
                let gb = ctx.needs(1).then(|| {
                    let b = ctx.input(1);
                    Tensor::from_vec(b.shape(), reduce_to(g.data(), b.len())).map(|v| -v)
                });
                vec![Some(g.clone()), gb]
            },
        )
    }

    pub fn mul(self, rhs: Self) -> Self {
        self.broadcast(
            rhs,
            |x, y| x * y,
            |ctx, g| {
                let (a, b) = (ctx.input(0), ctx.input(1));
                let m = b.len().max(1);
                let ga = ctx.needs(0).then(|| {
                    let data =
                        g.data().chunks(m).flat_map(|ch| ch.iter().zip(b.data()).map(|(&g, &y)| g * y)).collect();
                    Tensor::from_vec(a.shape(), data)
                });
                let gb = ctx.needs(1).then(|| {
                    let prod: Vec<T> = g.data().iter().zip(a.data()).map(|(&g, &x)| g * x).collect();
                    Tensor::from_vec(b.shape(), reduce_to(&prod, m))
                });
                vec![ga, gb]
            },
        )
    }

    /// `self[.., k] @ w[k, n]`: all leading axes are treated as rows.
    pub fn matmul(self, w: Self) -> Self {
        let (a, b) = (self.value(), w.value());
        assert_eq!(b.rank(), 2, "matmul rhs must be a matrix, got {:?}", b.shape());
        let k = b.dim(0);
        let n = b.dim(1);
        assert_eq!(*a.shape().last().unwrap(), k, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
        let rows = a.len() / k.max(1);
        let mut out = vec![T::zero(); rows * n];
        gemm_acc(View::new(a.data(), rows, k, false), View::new(b.data(), k, n, false), &mut out);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.g.push_op(
            Tensor::from_vec(shape, out),
            &[self.id, w.id],
            Box::new(move |ctx, g| {
                let (a, b) = (ctx.input(0), ctx.input(1));
                let gv = View::new(g.data(), rows, n, false);
                let ga = ctx.needs(0).then(|| {
                    let mut d = vec![T::zero(); rows * k];
                    gemm_acc(gv, View::new(b.data(), k, n, true), &mut d);
                    Tensor::from_vec(a.shape(), d)
                });
                let gb = ctx.needs(1).then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm_acc(View::new(a.data(), rows, k, true), gv, &mut d);
                    Tensor::from_vec(b.shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Batched product over the leading axis: `op(a[i]) @ op(b[i])` where
    /// `op` transposes the stored matrix when the flag is set.
    pub fn bmm(self, rhs: Self, trans_a: bool, trans_b: bool) -> Self {
        let (a, b) = (self.value(), rhs.value());
        assert!(a.rank() == 3 && b.rank() == 3, "bmm expects rank-3 operands");
        let batch = a.dim(0);
        assert_eq!(b.dim(0), batch, "bmm batch mismatch");
        let (ar, ac) = (a.dim(1), a.dim(2));
        let (br, bc) = (b.dim(1), b.dim(2));
        let (m, ka) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(ka, kb, "bmm inner dims {:?} x {:?}", a.shape(), b.shape());
        let (asz, bsz, osz) = (ar * ac, br * bc, m * n);
        let mut out = vec![T::zero(); batch * osz];
        for i in 0..batch {
            gemm_acc(
                View::new(&a.data()[i * asz..(i + 1) * asz], ar, ac, trans_a),
                View::new(&b.data()[i * bsz..(i + 1) * bsz], br, bc, trans_b),
                &mut out[i * osz..(i + 1) * osz],
            );
        }
        self.g.push_op(
            Tensor::from_vec([batch, m, n], out),
            &[self.id, rhs.id],
            Box::new(move |ctx, g| {
                let (a, b) = (ctx.input(0), ctx.input(1));
                let ga = ctx.needs(0).then(|| {
                    let mut d = vec![T::zero(); batch * asz];
                    for i in 0..batch {
                        let gv = View::new(&g.data()[i * osz..(i + 1) * osz], m, n, false);
                        let bv = View::new(&b.data()[i * bsz..(i + 1) * bsz], br, bc, trans_b);
                        let dst = &mut d[i * asz..(i + 1) * asz];
                        if trans_a {
                            gemm_acc(bv, gv.t(), dst);
                        } else {
                            gemm_acc(gv, bv.t(), dst);
                        }
                    }
                    Tensor::from_vec(a.shape(), d)
                });
                let gb = ctx.needs(1).then(|| {
                    let mut d = vec![T::zero(); batch * bsz];
                    for i in 0..batch {
                        let gv = View::new(&g.data()[i * osz..(i + 1) * osz], m, n, false);
                        let av = View::new(&a.data()[i * asz..(i + 1) * asz], ar, ac, trans_a);
                        let dst = &mut d[i * bsz..(i + 1) * bsz];
                        if trans_b {
                            gemm_acc(gv.t(), av, dst);
                        } else {
                            gemm_acc(av.t(), gv, dst);
                        }
                    }
                    Tensor::from_vec(b.shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.g.push_op(
            Tensor::scalar(s),
            &[self.id],
            Box::new(|ctx, g| vec![Some(Tensor::full(ctx.input(0).shape(), g.item()))]),
        )
    }

    pub fn mean(self) -> Self {
        let n = self.value().len();
        self.sum().scale(T::one() / T::from_usize_lossy(n.max(1)))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let v = (*self.value()).clone().reshape(shape);
        self.g.push_op(v, &[self.id], Box::new(|ctx, g| vec![Some(g.clone().reshape(ctx.input(0).shape()))]))
    }

    pub fn permute(self, axes: &[usize]) -> Self {
        let x = self.value();
        let (shape, data) = permute_data(x.data(), x.shape(), axes);
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.g.push_op(
            Tensor::from_vec(shape, data),
            &[self.id],
            Box::new(move |_ctx, g| {
                let (s, d) = permute_data(g.data(), g.shape(), &inverse);
                vec![Some(Tensor::from_vec(s, d))]
            }),
        )
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow {start}+{len} out of {:?} axis {axis}", shape);
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.g.push_op(
            Tensor::from_vec(out_shape, data),
            &[self.id],
            Box::new(move |_ctx, g| {
                let mut d = vec![T::zero(); outer * full];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    d[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_vec(shape.clone(), d))]
            }),
        )
    }

    /// Rows of a `[R, ...]` tensor selected by index; `None` yields a zero row.
    pub fn gather_rows(self, index: Rc<Vec<Option<usize>>>) -> Self {
        let x = self.value();
        let rows = x.dim(0);
        let row_len = x.len() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * row_len);
        for ix in index.iter() {
            match *ix {
                Some(r) => {
                    assert!(r < rows, "gather index {r} out of {rows} rows");
                    data.extend_from_slice(&x.data()[r * row_len..(r + 1) * row_len]);
                }
                None => data.extend(std::iter::repeat_n(T::zero(), row_len)),
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        self.g.push_op(
            Tensor::from_vec(shape, data),
            &[self.id],
            Box::new(move |ctx, g| {
                let x = ctx.input(0);
                let mut d = vec![T::zero(); x.len()];
                for (i, ix) in index.iter().enumerate() {
                    if let Some(r) = *ix {
                        let src = &g.data()[i * row_len..(i + 1) * row_len];
                        for (o, &v) in d[r * row_len..(r + 1) * row_len].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(x.shape(), d))]
            }),
        )
    }

    /// Reverses the order of rows (axis 0).
    pub fn flip_rows(self) -> Self {
        let n = self.dim(0);
        self.gather_rows(Rc::new((0..n).rev().map(Some).collect()))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Self {
        assert!(!parts.is_empty(), "concat of nothing");
        let g = parts[0].g;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let sizes: Vec<usize> = values
            .iter()
            .map(|v| {
                assert_eq!(v.rank(), first.len(), "concat rank mismatch");
                for (d, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
                    assert!(d == axis || a == b, "concat dim {d} mismatch {:?} vs {:?}", v.shape(), first);
                }
                v.dim(axis)
            })
            .collect();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        g.push_op(
            Tensor::from_vec(shape, data),
            &ids,
            Box::new(move |ctx, gr| {
                let mut outs: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (o, &s) in outs.iter_mut().zip(&sizes) {
                        o.extend_from_slice(&gr.data()[pos..pos + s * inner]);
                        pos += s * inner;
                    }
                }
                outs.into_iter()
                    .enumerate()
                    .map(|(i, d)| ctx.needs(i).then(|| Tensor::from_vec(ctx.input(i).shape(), d)))
                    .collect()
            }),
        )
    }
}

impl<'g, T: Scalar> std::ops::Add for Var<'g, T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Sub for Var<'g, T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Scalar> std::ops::Mul for Var<'g, T> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    // min(x, 0) - log1p(exp(-|x|))
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn gelu<T: Scalar>(x: T) -> T {
    let k: T = c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a: T = c(0.044715);
    let half: T = c(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T, _y: T) -> T {
    let k: T = c(0.797_884_560_802_865_4);
    let a: T = c(0.044715);
    let half: T = c(0.5);
    let three: T = c(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * a * x * x)
}
