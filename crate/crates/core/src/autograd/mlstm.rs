//! Matrix-memory LSTM recurrence with log-domain stabilisation.
//!
//! Per head, with stabiliser `m_0 = 0`:
//!
//! ```text
//! m_t = max(f_t + m_{t-1}, i_t)
//! i'_t = exp(i_t - m_t),   f'_t = exp(f_t + m_{t-1} - m_t)
//! C_t = f'_t C_{t-1} + i'_t k_t v_t^T
//! n_t = f'_t n_{t-1} + i'_t k_t
//! h_t = C_t^T q_t / max(|n_t . q_t|, exp(-m_t))
//! ```
//!
//! `i_t` and `f_t` are log-gates and keys are pre-scaled by `1/sqrt(d_k)`.
//! The stabilised states equal the unstabilised ones times `exp(-m_t)`, so
//! `h_t` does not depend on `m` and the stabiliser carries no gradient.

use super::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Head layout of the recurrence inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlstmDims {
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
}

/// Saved forward quantities needed by [`mlstm_backward`].
pub struct MlstmTrace<T> {
    len: usize,
    /// `C_t` for every step and head, `[T, H, dk, dv]`.
    c: Vec<T>,
    /// `n_t`, `[T, H, dk]`.
    n: Vec<T>,
    ia: Vec<T>,
    fa: Vec<T>,
    s: Vec<T>,
    den: Vec<T>,
    /// Whether the `|n.q|` branch of the denominator was active.
    s_branch: Vec<bool>,
    h: Vec<T>,
}

pub struct MlstmGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub igate: Vec<T>,
    pub fgate: Vec<T>,
}

fn check_len<T>(name: &str, data: &[T], expected: usize) {
    assert_eq!(data.len(), expected, "mlstm input `{name}` has {} values, expected {expected}", data.len());
}

/// Runs the recurrence left to right. Inputs are `q,k: [T, H*dk]`,
/// `v: [T, H*dv]`, gates `[T, H]`. Returns `h: [T, H*dv]` and the trace.
pub fn mlstm_forward<T: Scalar>(
    dims: MlstmDims,
    q: &[T],
    k: &[T],
    v: &[T],
    igate: &[T],
    fgate: &[T],
) -> (Vec<T>, MlstmTrace<T>) {
    let MlstmDims { heads, dk, dv } = dims;
    let len = igate.len() / heads.max(1);
    check_len("q", q, len * heads * dk);
    check_len("k", k, len * heads * dk);
    check_len("v", v, len * heads * dv);
    check_len("fgate", fgate, len * heads);
    let inv_sqrt = T::from_usize_lossy(dk).sqrt().recip();
    let tiny = T::min_positive_value();
    let cs = dk * dv;
    let mut tr = MlstmTrace {
        len,
        c: vec![T::zero(); len * heads * cs],
        n: vec![T::zero(); len * heads * dk],
        ia: vec![T::zero(); len * heads],
        fa: vec![T::zero(); len * heads],
        s: vec![T::zero(); len * heads],
        den: vec![T::zero(); len * heads],
        s_branch: vec![false; len * heads],
        h: vec![T::zero(); len * heads * dv],
    };
    let mut ks = vec![T::zero(); dk];
    for hd in 0..heads {
        let mut m_prev = T::zero();
        let mut c_prev = vec![T::zero(); cs];
        let mut n_prev = vec![T::zero(); dk];
        for t in 0..len {
            let g = t * heads + hd;
            let (it, ft) = (igate[g], fgate[g]);
            let m = (ft + m_prev).max(it);
            let ia = (it - m).exp();
            let fa = (ft + m_prev - m).exp();
            let qt = &q[g * dk..(g + 1) * dk];
            let vt = &v[g * dv..(g + 1) * dv];
            for (o, &kv) in ks.iter_mut().zip(&k[g * dk..(g + 1) * dk]) {
                *o = kv * inv_sqrt;
            }
            let c_t = &mut tr.c[g * cs..(g + 1) * cs];
            for a in 0..dk {
                let w = ia * ks[a];
                let row = &mut c_t[a * dv..(a + 1) * dv];
                for ((o, &p), &vb) in row.iter_mut().zip(&c_prev[a * dv..(a + 1) * dv]).zip(vt) {
                    *o = fa * p + w * vb;
                }
            }
            let n_t = &mut tr.n[g * dk..(g + 1) * dk];
            for a in 0..dk {
                n_t[a] = fa * n_prev[a] + ia * ks[a];
            }
            let s: T = n_t.iter().zip(qt).map(|(&a, &b)| a * b).sum();
            let e = (-m).exp();
            let abs_s = s.abs();
            let s_branch = abs_s >= e && abs_s >= tiny;
            let den = abs_s.max(e).max(tiny);
            let h = &mut tr.h[g * dv..(g + 1) * dv];
            h.iter_mut().for_each(|x| *x = T::zero());
            for a in 0..dk {
                let qa = qt[a];
                for (o, &cv) in h.iter_mut().zip(&c_t[a * dv..(a + 1) * dv]) {
                    *o += cv * qa;
                }
            }
            for o in h.iter_mut() {
                *o /= den;
            }
            tr.ia[g] = ia;
            tr.fa[g] = fa;
            tr.s[g] = s;
            tr.den[g] = den;
            tr.s_branch[g] = s_branch;
            c_prev.copy_from_slice(c_t);
            n_prev.copy_from_slice(n_t);
            m_prev = m;
        }
    }
    (tr.h.clone(), tr)
}

/// Backpropagation through time for [`mlstm_forward`].
pub fn mlstm_backward<T: Scalar>(
    dims: MlstmDims,
    q: &[T],
    k: &[T],
    v: &[T],
    trace: &MlstmTrace<T>,
    grad_h: &[T],
) -> MlstmGrads<T> {
    let MlstmDims { heads, dk, dv } = dims;
    let len = trace.len;
    let inv_sqrt = T::from_usize_lossy(dk).sqrt().recip();
    let cs = dk * dv;
    let mut out = MlstmGrads {
        q: vec![T::zero(); q.len()],
        k: vec![T::zero(); k.len()],
        v: vec![T::zero(); v.len()],
        igate: vec![T::zero(); len * heads],
        fgate: vec![T::zero(); len * heads],
    };
    let zeros_c = vec![T::zero(); cs];
    let zeros_n = vec![T::zero(); dk];
    let mut gnum = vec![T::zero(); dv];
    let mut ks = vec![T::zero(); dk];
    let mut dcv = vec![T::zero(); dk];
    for hd in 0..heads {
        let mut dc = vec![T::zero(); cs];
        let mut dn = vec![T::zero(); dk];
        for t in (0..len).rev() {
            let g = t * heads + hd;
            let qt = &q[g * dk..(g + 1) * dk];
            let vt = &v[g * dv..(g + 1) * dv];
            let c_t = &trace.c[g * cs..(g + 1) * cs];
            let n_t = &trace.n[g * dk..(g + 1) * dk];
            let h_t = &trace.h[g * dv..(g + 1) * dv];
            let gh = &grad_h[g * dv..(g + 1) * dv];
            let den = trace.den[g];
            for (o, &x) in gnum.iter_mut().zip(gh) {
                *o = x / den;
            }
            let gs = if trace.s_branch[g] {
                let gden = -gh.iter().zip(h_t).map(|(&a, &b)| a * b).sum::<T>() / den;
                gden * trace.s[g].signum()
            } else {
                T::zero()
            };
            let gq = &mut out.q[g * dk..(g + 1) * dk];
            for a in 0..dk {
                let row = &c_t[a * dv..(a + 1) * dv];
                gq[a] = row.iter().zip(&gnum).map(|(&x, &y)| x * y).sum::<T>() + gs * n_t[a];
            }
            for a in 0..dk {
                let qa = qt[a];
                for (o, &gb) in dc[a * dv..(a + 1) * dv].iter_mut().zip(&gnum) {
                    *o += qa * gb;
                }
                dn[a] += gs * qa;
            }
            let (c_prev, n_prev) = if t == 0 {
                (&zeros_c[..], &zeros_n[..])
            } else {
                let gp = g - heads;
                (&trace.c[gp * cs..(gp + 1) * cs], &trace.n[gp * dk..(gp + 1) * dk])
            };
            let gfa = dc.iter().zip(c_prev).map(|(&a, &b)| a * b).sum::<T>()
                + dn.iter().zip(n_prev).map(|(&a, &b)| a * b).sum::<T>();
            for (o, &kv) in ks.iter_mut().zip(&k[g * dk..(g + 1) * dk]) {
                *o = kv * inv_sqrt;
            }
            // dC v
            for a in 0..dk {
                dcv[a] = dc[a * dv..(a + 1) * dv].iter().zip(vt).map(|(&x, &y)| x * y).sum();
            }
            let ia = trace.ia[g];
            let gia = ks.iter().zip(&dcv).map(|(&x, &y)| x * y).sum::<T>()
                + dn.iter().zip(&ks).map(|(&x, &y)| x * y).sum::<T>();
            let gk = &mut out.k[g * dk..(g + 1) * dk];
            for a in 0..dk {
                gk[a] = ia * (dcv[a] + dn[a]) * inv_sqrt;
            }
            let gv = &mut out.v[g * dv..(g + 1) * dv];
            gv.iter_mut().for_each(|x| *x = T::zero());
            for a in 0..dk {
                let w = ia * ks[a];
                for (o, &d) in gv.iter_mut().zip(&dc[a * dv..(a + 1) * dv]) {
                    *o += w * d;
                }
            }
            let fa = trace.fa[g];
            out.igate[g] = gia * ia;
            out.fgate[g] = gfa * fa;
            dc.iter_mut().for_each(|x| *x *= fa);
            dn.iter_mut().for_each(|x| *x *= fa);
        }
    }
    out
}

fn first_non_finite<T: Scalar>(data: &[T], row_len: usize) -> Option<usize> {
    data.iter().position(|v| !v.is_finite()).map(|i| i / row_len.max(1))
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Recorded recurrence (`self` is `q`). Fails with the first sequence
    /// position holding a non-finite input.
    pub fn mlstm(self, k: Self, v: Self, igate: Self, fgate: Self, dims: MlstmDims) -> Result<Self> {
        let (qv, kv, vv, iv, fv) = (self.value(), k.value(), v.value(), igate.value(), fgate.value());
        for (name, t, w) in [
            ("q", &qv, dims.heads * dims.dk),
            ("k", &kv, dims.heads * dims.dk),
            ("v", &vv, dims.heads * dims.dv),
            ("igate", &iv, dims.heads),
            ("fgate", &fv, dims.heads),
        ] {
            if let Some(position) = first_non_finite(t.data(), w) {
                return Err(Error::NonFinite { what: format!("mlstm input `{name}`"), position });
            }
        }
        let len = iv.len() / dims.heads;
        let (h, trace) = mlstm_forward(dims, qv.data(), kv.data(), vv.data(), iv.data(), fv.data());
        let out = Tensor::from_vec([len, dims.heads * dims.dv], h);
        Ok(self.g.push_op(
            out,
            &[self.id, k.id, v.id, igate.id, fgate.id],
            Box::new(move |ctx, g| {
                let (q, k, v) = (ctx.input(0), ctx.input(1), ctx.input(2));
                let gr = mlstm_backward(dims, q.data(), k.data(), v.data(), &trace, g.data());
                vec![
                    Some(Tensor::from_vec(q.shape(), gr.q)),
                    Some(Tensor::from_vec(k.shape(), gr.k)),
                    Some(Tensor::from_vec(v.shape(), gr.v)),
                    Some(Tensor::from_vec(ctx.input(3).shape(), gr.igate)),
                    Some(Tensor::from_vec(ctx.input(4).shape(), gr.fgate)),
                ]
            }),
        ))
    }
}
