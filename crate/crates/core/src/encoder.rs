//! Siamese shifted-window transformer backbone.
//!
//! Feature maps are channel-last `[h*w, C]` with the spatial size carried
//! alongside. Layers alternate regular and cyclically shifted windows.

use std::rc::Rc;

use crate::autograd::{Graph, Var};
use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{Init, LayerNorm, Linear, ParamId, WeightInit};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Channel-last feature map.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap<'g, T: Scalar> {
    pub x: Var<'g, T>,
    pub height: usize,
    pub width: usize,
}

impl<'g, T: Scalar> FeatureMap<'g, T> {
    pub fn new(x: Var<'g, T>, height: usize, width: usize) -> Self {
        debug_assert_eq!(x.dim(0), height * width);
        Self { x, height, width }
    }

    pub fn channels(&self) -> usize {
        self.x.dim(1)
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// `[C, H, W]` copy of the values.
    pub fn to_chw(&self) -> Tensor<T> {
        let v = self.x.value();
        let (n, ch) = (self.tokens(), self.channels());
        let mut out = vec![T::zero(); n * ch];
        for (p, row) in v.data().chunks_exact(ch).enumerate() {
            for (k, &val) in row.iter().enumerate() {
                out[k * n + p] = val;
            }
        }
        Tensor::from_vec([ch, self.height, self.width], out)
    }
}

/// Four bi-temporal levels, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'g, T: Scalar> {
    pub levels: Vec<FeatureMap<'g, T>>,
}

/// Index of relative offset `(dy, dx)` in a `(2M-1)^2` bias table.
fn relative_index(window: usize, span: usize) -> Rc<Vec<Option<usize>>> {
    let side = 2 * window - 1;
    let l = span * span;
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        let (yi, xi) = (i / span, i % span);
        for j in 0..l {
            let (yj, xj) = (j / span, j % span);
            idx.push(Some((yi + window - 1 - yj) * side + (xi + window - 1 - xj)));
        }
    }
    Rc::new(idx)
}

/// Multi-head self-attention inside windows with a learned relative
/// position bias.
#[derive(Clone, Debug)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        std: f64,
    ) -> Self {
        let mut s = init.scope(name);
        let side = 2 * window - 1;
        Self {
            qkv: Linear::new(&mut s, "qkv", dim, 3 * dim, WeightInit::TruncNormal(std)),
            proj: Linear::new(&mut s, "proj", dim, dim, WeightInit::TruncNormal(std)),
            bias_table: s.weight("relative_position_bias_table", &[side * side, heads], WeightInit::TruncNormal(std)),
            dim,
            heads,
            window,
        }
    }

    /// `x: [num_windows, L, C]` with `L = span^2`, `span <= window`.
    /// `mask` is an additive `[num_windows, heads, L, L]` term.
    /// Returns the output `[num_windows, L, C]` and attention `[num_windows, heads, L, L]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        x: Var<'g, T>,
        span: usize,
        mask: Option<&Tensor<T>>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::Shape(format!(
                "window attention expects [windows, tokens, {}], got {shape:?}",
                self.dim
            )));
        }
        let (nw, l) = (shape[0], shape[1]);
        if l != span * span || span > self.window {
            return Err(Error::Shape(format!(
                "window holds {l} tokens, expected {span}^2 with span <= {}",
                self.window
            )));
        }
        let g = x.graph();
        let (h, dh) = (self.heads, self.dim / self.heads);
        let qkv = self
            .qkv
            .forward(x.reshape([nw * l, self.dim]))
            .reshape([nw, l, 3, h, dh])
            .permute(&[2, 0, 3, 1, 4])
            .reshape([3, nw * h, l, dh]);
        let part = |i: usize| qkv.narrow(0, i, 1).reshape([nw * h, l, dh]);
        let q = part(0).scale(c(1.0 / (dh as f64).sqrt()));
        let (k, v) = (part(1), part(2));
        let bias =
            g.param(self.bias_table).gather_rows(relative_index(self.window, span)).permute(&[1, 0]).reshape([h, l, l]);
        let mut scores = q.bmm(k, false, true).reshape([nw, h, l, l]).add(bias);
        if let Some(m) = mask {
            scores = scores.add(g.constant(m.clone()));
        }
        let attn = scores.softmax_last();
        let out = attn
            .reshape([nw * h, l, l])
            .bmm(v, false, false)
            .reshape([nw, h, l, dh])
            .permute(&[0, 2, 1, 3])
            .reshape([nw * l, self.dim]);
        Ok((self.proj.forward(out).reshape([nw, l, self.dim]), attn))
    }
}

/// Token routing for one window layer on an `h x w` map.
struct WindowPlan<T> {
    span: usize,
    num_windows: usize,
    /// Partitioned row -> source token (None = zero padding).
    partition: Rc<Vec<Option<usize>>>,
    /// Source token -> partitioned row.
    restore: Rc<Vec<Option<usize>>>,
    mask: Option<Tensor<T>>,
}

fn plan_windows<T: Scalar>(
    h: usize,
    w: usize,
    window: usize,
    shifted: bool,
    pad: bool,
    heads: usize,
) -> Result<WindowPlan<T>> {
    let (span, shift) = if h <= window && w <= window && pad {
        (h.max(w), 0)
    } else {
        if !pad && (!h.is_multiple_of(window) || !w.is_multiple_of(window)) {
            return Err(Error::Config(format!(
                "feature map {h}x{w} is not divisible by window {window} and padding is disabled"
            )));
        }
        (window, if shifted { window / 2 } else { 0 })
    };
    let hp = h.div_ceil(span) * span;
    let wp = w.div_ceil(span) * span;
    let (ny, nx) = (hp / span, wp / span);
    let l = span * span;
    let num_windows = ny * nx;
    let mut partition = Vec::with_capacity(num_windows * l);
    let mut restore = vec![None; h * w];
    let mut labels = Vec::with_capacity(num_windows * l);
    let band = |p: usize, full: usize| -> usize {
        if shift == 0 || p < full - span {
            0
        } else if p < full - shift {
            1
        } else {
            2
        }
    };
    for wy in 0..ny {
        for wx in 0..nx {
            for py in 0..span {
                for px in 0..span {
                    let (sy, sx) = (wy * span + py, wx * span + px);
                    let (oy, ox) = ((sy + shift) % hp, (sx + shift) % wp);
                    let row = partition.len();
                    if oy < h && ox < w {
                        partition.push(Some(oy * w + ox));
                        restore[oy * w + ox] = Some(row);
                    } else {
                        partition.push(None);
                    }
                    labels.push(band(sy, hp) * 3 + band(sx, wp));
                }
            }
        }
    }
    let mask = (shift > 0).then(|| {
        let mut data = Vec::with_capacity(num_windows * heads * l * l);
        for win in 0..num_windows {
            let lab = &labels[win * l..(win + 1) * l];
            for _ in 0..heads {
                for i in 0..l {
                    for j in 0..l {
                        data.push(if lab[i] == lab[j] { T::zero() } else { T::neg_infinity() });
                    }
                }
            }
        }
        Tensor::from_vec([num_windows, heads, l, l], data)
    });
    Ok(WindowPlan { span, num_windows, partition: Rc::new(partition), restore: Rc::new(restore), mask })
}

/// One pre-norm transformer layer over (possibly shifted) windows.
#[derive(Clone, Debug)]
pub struct SwinLayer {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shifted: bool,
}

impl SwinLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        mlp_ratio: usize,
        shifted: bool,
        std: f64,
    ) -> Self {
        let mut s = init.scope(name);
        Self {
            norm1: LayerNorm::new(&mut s, "norm1", dim),
            attn: WindowAttention::new(&mut s, "attn", dim, heads, window, std),
            norm2: LayerNorm::new(&mut s, "norm2", dim),
            fc1: Linear::new(&mut s, "mlp.fc1", dim, dim * mlp_ratio, WeightInit::TruncNormal(std)),
            fc2: Linear::new(&mut s, "mlp.fc2", dim * mlp_ratio, dim, WeightInit::TruncNormal(std)),
            shifted,
        }
    }

    pub fn forward<'g, T: Scalar>(&self, x: FeatureMap<'g, T>, pad: bool) -> Result<FeatureMap<'g, T>> {
        let plan = plan_windows::<T>(x.height, x.width, self.attn.window, self.shifted, pad, self.attn.heads)?;
        let dim = x.channels();
        let windows = self.norm1.forward(x.x).gather_rows(plan.partition.clone()).reshape([
            plan.num_windows,
            plan.span * plan.span,
            dim,
        ]);
        let (attended, _) = self.attn.forward(windows, plan.span, plan.mask.as_ref())?;
        let attended = attended.reshape([plan.num_windows * plan.span * plan.span, dim]).gather_rows(plan.restore);
        let x1 = x.x.add(attended);
        let mlp = self.fc2.forward(self.fc1.forward(self.norm2.forward(x1)).gelu());
        Ok(FeatureMap::new(x1.add(mlp), x.height, x.width))
    }
}

/// 2x2 neighbourhood concatenation followed by a linear reduction.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, out_dim: usize, std: f64) -> Self {
        let mut s = init.scope(name);
        Self {
            norm: LayerNorm::new(&mut s, "norm", 4 * dim),
            reduction: Linear::no_bias(&mut s, "reduction", 4 * dim, out_dim, WeightInit::TruncNormal(std)),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, x: FeatureMap<'g, T>) -> Result<FeatureMap<'g, T>> {
        let (h, w) = (x.height, x.width);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("patch merging needs an even feature map, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let parts: Vec<_> = [(0, 0), (1, 0), (0, 1), (1, 1)]
            .into_iter()
            .map(|(dy, dx)| {
                let idx = (0..ho * wo).map(|p| Some((2 * (p / wo) + dy) * w + 2 * (p % wo) + dx)).collect();
                x.x.gather_rows(Rc::new(idx))
            })
            .collect();
        let merged = self.reduction.forward(self.norm.forward(Var::concat(&parts, 1)));
        Ok(FeatureMap::new(merged, ho, wo))
    }
}

#[derive(Clone, Debug)]
pub struct SwinStage {
    pub merge: Option<PatchMerging>,
    pub layers: Vec<SwinLayer>,
    pub out_norm: LayerNorm,
}

/// Shared-weight backbone applied to both dates.
#[derive(Clone, Debug)]
pub struct SiameseEncoder {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub patch_norm: LayerNorm,
    pub stages: Vec<SwinStage>,
}

impl SiameseEncoder {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Self {
        let std = cfg.init_std;
        let mut s = init.scope("encoder");
        let p = cfg.patch_size;
        let patch_embed = Linear::new(&mut s, "patch_embed.proj", 3 * p * p, cfg.dims[0], WeightInit::TruncNormal(std));
        let patch_norm = LayerNorm::new(&mut s, "patch_embed.norm", cfg.dims[0]);
        let stages = (0..4)
            .map(|l| {
                let mut st = s.scope(&format!("stages.{l}"));
                let dim = cfg.dims[l];
                let merge = (l > 0).then(|| PatchMerging::new(&mut st, "downsample", cfg.dims[l - 1], dim, std));
                let layers = (0..cfg.depths[l])
                    .map(|i| {
                        SwinLayer::new(
                            &mut st,
                            &format!("blocks.{i}"),
                            dim,
                            cfg.heads[l],
                            cfg.window,
                            cfg.mlp_ratio,
                            i % 2 == 1,
                            std,
                        )
                    })
                    .collect();
                let out_norm = LayerNorm::new(&mut st, "out_norm", dim);
                SwinStage { merge, layers, out_norm }
            })
            .collect();
        Self { cfg: cfg.clone(), patch_embed, patch_norm, stages }
    }

    /// Normalised non-overlapping patches `[h*w, 3*p*p]`, flattened as `(c, dy, dx)`.
    fn patchify<T: Scalar>(&self, image: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::Shape(format!("expected a [3, H, W] image, got {shape:?}")));
        }
        let (hh, ww) = (shape[1], shape[2]);
        let unit = self.cfg.patch_size * 8;
        if hh == 0 || ww == 0 || hh % unit != 0 || ww % unit != 0 {
            return Err(Error::Shape(format!("image {hh}x{ww} must be divisible by patch_size x 8 = {unit}")));
        }
        let p = self.cfg.patch_size;
        let (h, w) = (hh / p, ww / p);
        let mean: Vec<T> = self.cfg.mean.iter().map(|&m| c(m)).collect();
        let inv_std: Vec<T> = self.cfg.std.iter().map(|&s| c(1.0 / s)).collect();
        let d = image.data();
        let mut out = Vec::with_capacity(h * w * 3 * p * p);
        for py in 0..h {
            for px in 0..w {
                for ch in 0..3 {
                    for dy in 0..p {
                        let row = (ch * hh + py * p + dy) * ww + px * p;
                        for &v in &d[row..row + p] {
                            out.push((v - mean[ch]) * inv_std[ch]);
                        }
                    }
                }
            }
        }
        Ok((Tensor::from_vec([h * w, 3 * p * p], out), h, w))
    }

    /// Four-level features of one image, finest first.
    pub fn forward_single<'g, T: Scalar>(
        &self,
        g: &'g Graph<'g, T>,
        image: &Tensor<T>,
    ) -> Result<Vec<FeatureMap<'g, T>>> {
        let (patches, h, w) = self.patchify(image)?;
        let x = self.patch_norm.forward(self.patch_embed.forward(g.constant(patches)));
        let mut fm = FeatureMap::new(x, h, w);
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                fm = m.forward(fm)?;
            }
            for layer in &stage.layers {
                fm = layer.forward(fm, self.cfg.pad_to_window)?;
            }
            levels.push(FeatureMap::new(stage.out_norm.forward(fm.x), fm.height, fm.width));
        }
        Ok(levels)
    }

    /// Runs both dates through the same weights and concatenates each level
    /// on channels, pre-change first.
    pub fn siamese_forward<'g, T: Scalar>(
        &self,
        g: &'g Graph<'g, T>,
        image_t1: &Tensor<T>,
        image_t2: &Tensor<T>,
    ) -> Result<FeaturePyramid<'g, T>> {
        if image_t1.shape() != image_t2.shape() {
            return Err(Error::Shape(format!(
                "image pair shapes differ: {:?} vs {:?}",
                image_t1.shape(),
                image_t2.shape()
            )));
        }
        let a = self.forward_single(g, image_t1)?;
        let b = self.forward_single(g, image_t2)?;
        let levels = a
            .into_iter()
            .zip(b)
            .map(|(x, y)| FeatureMap::new(Var::concat(&[x.x, y.x], 1), x.height, x.width))
            .collect();
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &EncoderConfig) -> (ParamStore<f64>, SiameseEncoder) {
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = SiameseEncoder::new(&mut Init::new(&mut store, &mut rng), cfg);
        (store, enc)
    }

    fn image(seed: u64, size: usize) -> Tensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec([3, size, size], (0..3 * size * size).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn pyramid_shapes_and_weight_sharing() {
        let (store, enc) = build(&EncoderConfig::tiny());
        let g = Graph::inference(&store);
        let img = image(1, 64);
        let pyr = enc.siamese_forward(&g, &img, &img).unwrap();
        let dims: Vec<_> = pyr.levels.iter().map(|l| (l.channels(), l.height, l.width)).collect();
        assert_eq!(dims, vec![(32, 16, 16), (64, 8, 8), (128, 4, 4), (256, 2, 2)]);
        for l in &pyr.levels {
            let v = l.x.value();
            let c = l.channels();
            for row in v.data().chunks(c) {
                assert_eq!(row[..c / 2], row[c / 2..]);
            }
        }
        assert!(enc.siamese_forward(&g, &image(1, 60), &image(2, 60)).is_err());
    }

    #[test]
    fn shifted_mask_blocks_wrapped_tokens() {
        let plan = plan_windows::<f64>(8, 8, 4, true, true, 1).unwrap();
        let mask = plan.mask.unwrap();
        assert_eq!(mask.shape(), &[4, 1, 16, 16]);
        // the top-left window has no wrapped tokens
        assert!(mask.data()[..256].iter().all(|&v| v == 0.0));
        // the bottom-right window mixes four regions
        let last = &mask.data()[3 * 256..];
        assert_eq!(last.iter().filter(|v| v.is_infinite()).count(), 256 - 4 * 16);
        let mut seen = [false; 64];
        for r in plan.partition.iter().flatten() {
            assert!(!seen[*r]);
            seen[*r] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert!(plan_windows::<f64>(6, 6, 4, false, false, 1).is_err());
    }

    #[test]
    fn padded_map_keeps_shape() {
        let mut store = ParamStore::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = SwinLayer::new(&mut Init::new(&mut store, &mut rng), "l", 8, 2, 4, 2, true, 0.02);
        let g = Graph::inference(&store);
        for (h, w) in [(6, 10), (3, 3), (8, 8)] {
            let x = g.constant(Tensor::from_vec([h * w, 8], (0..h * w * 8).map(|i| (i as f64).sin()).collect()));
            let y = layer.forward(FeatureMap::new(x, h, w), true).unwrap();
            assert_eq!(y.x.shape(), vec![h * w, 8]);
            assert!(y.x.value().all_finite());
        }
    }
}
