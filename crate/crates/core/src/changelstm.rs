//! Multi-level change features refined as one long sequence by
//! alternating-direction mLSTM blocks.

use std::rc::Rc;

use rand_distr::{Distribution, Normal};

use crate::autograd::{MlstmDims, SparseMatrix, Var};
use crate::config::ChangeLstmConfig;
use crate::encoder::{FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, WeightInit};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Placement of each pyramid level in the flattened sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelLayout {
    /// `(height, width, channels)` per level.
    pub levels: Vec<(usize, usize, usize)>,
    pub offsets: Vec<usize>,
    pub total: usize,
}

impl LevelLayout {
    pub fn new(levels: Vec<(usize, usize, usize)>) -> Self {
        let mut offsets = Vec::with_capacity(levels.len());
        let mut total = 0;
        for &(h, w, _) in &levels {
            offsets.push(total);
            total += h * w;
        }
        Self { levels, offsets, total }
    }

    pub fn of<T: Scalar>(pyramid: &FeaturePyramid<'_, T>) -> Self {
        Self::new(pyramid.levels.iter().map(|l| (l.height, l.width, l.channels())).collect())
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.levels.iter().zip(&other.levels).all(|(a, b)| a.0 == b.0 && a.1 == b.1)
    }

    /// Level index of every sequence slot.
    fn level_ids(&self) -> Rc<Vec<Option<usize>>> {
        Rc::new(
            self.levels.iter().enumerate().flat_map(|(l, &(h, w, _))| std::iter::repeat_n(Some(l), h * w)).collect(),
        )
    }
}

/// Flattened multi-level sequence `[T, d_c]`.
#[derive(Clone, Debug)]
pub struct TokenSequence<'g, T: Scalar> {
    pub values: Var<'g, T>,
    pub layout: LevelLayout,
}

/// mLSTM recurrence with an output gate.
///
/// `q, k: [T, H*dk]`, `v, ogate: [T, H*dv]`, `igate, log_fgate: [T, H]`.
/// The forget gate is given in log space; `ogate` is a pre-activation.
pub fn mlstm_scan<'g, T: Scalar>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    igate: Var<'g, T>,
    log_fgate: Var<'g, T>,
    ogate: Var<'g, T>,
    heads: usize,
) -> Result<Var<'g, T>> {
    let len = q.dim(0);
    let shapes = [q.shape(), k.shape(), v.shape(), igate.shape(), log_fgate.shape(), ogate.shape()];
    if heads == 0
        || shapes.iter().any(|s| s.len() != 2 || s[0] != len)
        || !q.dim(1).is_multiple_of(heads)
        || !v.dim(1).is_multiple_of(heads)
        || k.dim(1) != q.dim(1)
        || ogate.dim(1) != v.dim(1)
        || igate.dim(1) != heads
        || log_fgate.dim(1) != heads
    {
        return Err(Error::Shape(format!("inconsistent mlstm inputs {shapes:?} for {heads} heads")));
    }
    if let Some(position) = ogate.value().data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { what: "mlstm input `ogate`".into(), position: position / ogate.dim(1) });
    }
    let dims = MlstmDims { heads, dk: q.dim(1) / heads, dv: v.dim(1) / heads };
    let h = q.mlstm(k, v, igate, log_fgate, dims)?;
    Ok(ogate.sigmoid().mul(h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Depthwise convolution along the sequence that only looks back.
#[derive(Clone, Debug)]
pub struct CausalConv {
    /// `[kernel, channels]`, tap `kernel-1` is the current position.
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl CausalConv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, kernel: usize, dim: usize) -> Self {
        let mut s = init.scope(name);
        let bound = 1.0 / (kernel as f64).sqrt();
        Self {
            weight: s.uniform("weight", &[kernel, dim], -bound, bound),
            bias: s.uniform("bias", &[dim], -bound, bound),
            kernel,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let g = x.graph();
        let (len, dim) = (x.dim(0), x.dim(1));
        let w = g.param(self.weight);
        let mut out: Option<Var<'g, T>> = None;
        for tap in 0..self.kernel {
            let lag = self.kernel - 1 - tap;
            let shifted =
                if lag == 0 { x } else { x.gather_rows(Rc::new((0..len).map(|t| t.checked_sub(lag)).collect())) };
            let term = shifted.mul(w.narrow(0, tap, 1).reshape([dim]));
            out = Some(match out {
                Some(acc) => acc.add(term),
                None => term,
            });
        }
        out.expect("kernel >= 1").add(g.param(self.bias))
    }
}

/// Pre-norm mLSTM block with a SiLU-gated second branch and a residual.
#[derive(Clone, Debug)]
pub struct XlstmBlock {
    pub norm: LayerNorm,
    pub up: Linear,
    pub conv: CausalConv,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub igate: Linear,
    pub fgate: Linear,
    pub ogate: Linear,
    pub head_norm: ParamId,
    pub down: Linear,
    pub heads: usize,
    pub dim: usize,
    pub direction: Direction,
}

impl XlstmBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &ChangeLstmConfig, direction: Direction) -> Self {
        let mut s = init.scope(name);
        let d = cfg.dim;
        let h = cfg.heads;
        let std = WeightInit::TruncNormal(0.02);
        let igate = Linear::new(&mut s, "igate", 3 * d, h, WeightInit::Zeros);
        let fgate = Linear::new(&mut s, "fgate", 3 * d, h, WeightInit::Zeros);
        // forget biases spread over [3, 6], input biases near zero
        let fb: Vec<f64> = (0..h).map(|i| if h == 1 { 3.0 } else { 3.0 + 3.0 * i as f64 / (h - 1) as f64 }).collect();
        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let ib: Vec<f64> = (0..h).map(|_| normal.sample(s.rng())).collect();
        s.set(fgate.bias.expect("gate bias"), Tensor::from_f64([h], &fb));
        s.set(igate.bias.expect("gate bias"), Tensor::from_f64([h], &ib));
        Self {
            norm: LayerNorm::new(&mut s, "norm", d),
            up: Linear::new(&mut s, "proj_up", d, 2 * d, std),
            conv: CausalConv::new(&mut s, "conv", cfg.conv_kernel, d),
            q: Linear::no_bias(&mut s, "q", d, d, std),
            k: Linear::no_bias(&mut s, "k", d, d, std),
            v: Linear::no_bias(&mut s, "v", d, d, std),
            igate,
            fgate,
            ogate: Linear::new(&mut s, "ogate", d, d, std),
            head_norm: s.ones("head_norm", &[d]),
            down: Linear::new(&mut s, "proj_down", d, d, std),
            heads: h,
            dim: d,
            direction,
        }
    }

    /// The block without the residual, in the forward direction.
    pub fn body<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let (len, d, h) = (x.dim(0), self.dim, self.heads);
        let up = self.up.forward(self.norm.forward(x));
        let (inner, gate) = (up.narrow(1, 0, d), up.narrow(1, d, d));
        let conv = self.conv.forward(inner).silu();
        let (q, k, v) = (self.q.forward(conv), self.k.forward(conv), self.v.forward(inner));
        let qkv = Var::concat(&[q, k, v], 1);
        let i = self.igate.forward(qkv);
        let f = self.fgate.forward(qkv).log_sigmoid();
        let o = self.ogate.forward(inner);
        let hidden = mlstm_scan(q, k, v, i, f, o, h)?;
        let normed =
            hidden.reshape([len, h, d / h]).normalize_last(c(1e-5)).reshape([len, d]).mul(g.param(self.head_norm));
        Ok(self.down.forward(normed.mul(gate.silu())))
    }

    pub fn forward<'g, T: Scalar>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = match self.direction {
            Direction::Forward => self.body(x)?,
            Direction::Reverse => self.body(x.flip_rows())?.flip_rows(),
        };
        Ok(x.add(y))
    }
}

/// Level projection, sequence refinement and back-projection.
#[derive(Clone, Debug)]
pub struct ChangeLstm {
    pub cfg: ChangeLstmConfig,
    pub in_proj: Vec<Linear>,
    pub out_proj: Vec<Linear>,
    pub pos_embed: Option<ParamId>,
    pub level_embed: Option<ParamId>,
    pub blocks: Vec<XlstmBlock>,
    /// Grid the position embeddings were sized for.
    pub train_layout: LevelLayout,
}

impl ChangeLstm {
    /// `layout` gives the per-level grid and channel count (`2 c_l`) at the
    /// training resolution.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &ChangeLstmConfig, layout: LevelLayout) -> Self {
        let mut s = init.scope("changelstm");
        if cfg.depth == 0 {
            return Self {
                cfg: cfg.clone(),
                in_proj: Vec::new(),
                out_proj: Vec::new(),
                pos_embed: None,
                level_embed: None,
                blocks: Vec::new(),
                train_layout: layout,
            };
        }
        let d = cfg.dim;
        let in_proj = layout
            .levels
            .iter()
            .enumerate()
            .map(|(l, &(_, _, ch))| Linear::new(&mut s, &format!("in_proj.{l}"), ch, d, WeightInit::TruncNormal(0.02)))
            .collect();
        let pos_embed = Some(s.weight("pos_embed", &[layout.total, d], WeightInit::TruncNormal(0.02)));
        let level_embed = Some(s.weight("level_embed", &[layout.levels.len(), d], WeightInit::TruncNormal(0.02)));
        let blocks = (0..2 * cfg.depth)
            .map(|i| {
                let dir = if i % 2 == 0 { Direction::Forward } else { Direction::Reverse };
                XlstmBlock::new(&mut s, &format!("blocks.{i}"), cfg, dir)
            })
            .collect();
        let out_proj = layout
            .levels
            .iter()
            .enumerate()
            .map(|(l, &(_, _, ch))| Linear::new(&mut s, &format!("out_proj.{l}"), d, ch, WeightInit::TruncNormal(0.02)))
            .collect();
        Self { cfg: cfg.clone(), in_proj, out_proj, pos_embed, level_embed, blocks, train_layout: layout }
    }

    pub fn enabled(&self) -> bool {
        !self.blocks.is_empty()
    }

    fn position_embedding<'g, T: Scalar>(&self, table: Var<'g, T>, layout: &LevelLayout) -> Var<'g, T> {
        if layout.same_grid(&self.train_layout) {
            return table;
        }
        let parts: Vec<_> = self
            .train_layout
            .levels
            .iter()
            .zip(&layout.levels)
            .zip(&self.train_layout.offsets)
            .map(|((&(th, tw, _), &(h, w, _)), &off)| {
                let grid = table.narrow(0, off, th * tw);
                if (th, tw) == (h, w) {
                    grid
                } else {
                    grid.resample(Rc::new(SparseMatrix::bilinear(th, tw, h, w)))
                }
            })
            .collect();
        Var::concat(&parts, 0)
    }

    pub fn project_and_flatten<'g, T: Scalar>(&self, pyramid: &FeaturePyramid<'g, T>) -> Result<TokenSequence<'g, T>> {
        let layout = LevelLayout::of(pyramid);
        if layout.levels.len() != self.train_layout.levels.len() {
            return Err(Error::Shape(format!(
                "expected {} levels, got {}",
                self.train_layout.levels.len(),
                layout.levels.len()
            )));
        }
        for (l, (a, b)) in layout.levels.iter().zip(&self.train_layout.levels).enumerate() {
            if a.2 != b.2 {
                return Err(Error::Shape(format!("level {} has {} channels, configured for {}", l + 1, a.2, b.2)));
            }
        }
        let (pos, lvl) = match (self.pos_embed, self.level_embed) {
            (Some(p), Some(l)) => (p, l),
            _ => return Err(Error::Contract("ChangeLSTM is disabled".into())),
        };
        let g = pyramid.levels[0].x.graph();
        let parts: Vec<_> = pyramid.levels.iter().zip(&self.in_proj).map(|(f, p)| p.forward(f.x)).collect();
        let values = Var::concat(&parts, 0)
            .add(self.position_embedding(g.param(pos), &layout))
            .add(g.param(lvl).gather_rows(layout.level_ids()));
        Ok(TokenSequence { values, layout })
    }

    /// Change-aware levels with the input shapes; a disabled module returns
    /// the pyramid unchanged.
    pub fn forward<'g, T: Scalar>(&self, pyramid: &FeaturePyramid<'g, T>) -> Result<Vec<FeatureMap<'g, T>>> {
        if !self.enabled() {
            return Ok(pyramid.levels.clone());
        }
        let seq = self.project_and_flatten(pyramid)?;
        let mut x = seq.values;
        for block in &self.blocks {
            x = block.forward(x)?;
        }
        Ok(seq
            .layout
            .levels
            .iter()
            .zip(&seq.layout.offsets)
            .zip(&self.out_proj)
            .map(|((&(h, w, _), &off), proj)| FeatureMap::new(proj.forward(x.narrow(0, off, h * w)), h, w))
            .collect())
    }
}
