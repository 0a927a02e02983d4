//! Pyramid-pooling + FPN fusion into one representation shared by the
//! change-map head and the caption head.

use std::rc::Rc;

use crate::autograd::{Graph, SparseMatrix, Var};
use crate::config::DecoderConfig;
use crate::data::{END, START};
use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Embedding, Init, LayerNorm, Linear, WeightInit};
use crate::scalar::{c, Scalar};
use crate::tensor::Tensor;

/// Square-kernel convolution with zero padding on channel-last maps.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub linear: Linear,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cin: usize, cout: usize, kernel: usize) -> Self {
        Self { linear: Linear::new(init, name, kernel * kernel * cin, cout, WeightInit::Kaiming), kernel }
    }

    pub fn forward<'g, T: Scalar>(&self, x: FeatureMap<'g, T>) -> FeatureMap<'g, T> {
        if self.kernel == 1 {
            return FeatureMap::new(self.linear.forward(x.x), x.height, x.width);
        }
        let (h, w) = (x.height as isize, x.width as isize);
        let r = (self.kernel / 2) as isize;
        let mut taps = Vec::with_capacity(self.kernel * self.kernel);
        for dy in -r..=r {
            for dx in -r..=r {
                let idx = (0..h * w)
                    .map(|p| {
                        let (y, xx) = (p / w + dy, p % w + dx);
                        (y >= 0 && y < h && xx >= 0 && xx < w).then(|| (y * w + xx) as usize)
                    })
                    .collect();
                taps.push(x.x.gather_rows(Rc::new(idx)));
            }
        }
        FeatureMap::new(self.linear.forward(Var::concat(&taps, 1)), x.height, x.width)
    }
}

fn resize<'g, T: Scalar>(x: FeatureMap<'g, T>, h: usize, w: usize, nearest: bool) -> FeatureMap<'g, T> {
    if (x.height, x.width) == (h, w) {
        return x;
    }
    let map = if nearest {
        SparseMatrix::nearest(x.height, x.width, h, w)
    } else {
        SparseMatrix::bilinear(x.height, x.width, h, w)
    };
    FeatureMap::new(x.x.resample(Rc::new(map)), h, w)
}

/// Fused change-aware features `[h*w, d]` read by both heads.
#[derive(Clone, Copy, Debug)]
pub struct UniversalRepresentation<'g, T: Scalar> {
    pub y: FeatureMap<'g, T>,
}

/// PPM on the deepest level, top-down FPN, multi-level fusion.
#[derive(Clone, Debug)]
pub struct UnifiedDecoder {
    pub cfg: DecoderConfig,
    pub ppm: Vec<Linear>,
    pub ppm_bottleneck: Conv2d,
    pub laterals: Vec<Linear>,
    pub fpn_convs: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl UnifiedDecoder {
    /// `in_channels` lists the channel count of each level, finest first.
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &DecoderConfig, in_channels: &[usize]) -> Self {
        let mut s = init.scope("decoder");
        let f = cfg.dim / 4;
        let k = cfg.fuse_kernel;
        let deepest = *in_channels.last().expect("at least one level");
        let ppm = cfg
            .pool_scales
            .iter()
            .enumerate()
            .map(|(i, _)| Linear::new(&mut s, &format!("ppm.{i}"), deepest, f, WeightInit::Kaiming))
            .collect();
        let ppm_bottleneck = Conv2d::new(&mut s, "ppm_bottleneck", deepest + cfg.pool_scales.len() * f, f, k);
        let n = in_channels.len();
        let laterals = in_channels[..n - 1]
            .iter()
            .enumerate()
            .map(|(l, &ch)| Linear::new(&mut s, &format!("lateral.{l}"), ch, f, WeightInit::Kaiming))
            .collect();
        let fpn_convs = (0..n - 1).map(|l| Conv2d::new(&mut s, &format!("fpn.{l}"), f, f, k)).collect();
        let fuse = Conv2d::new(&mut s, "fuse", n * f, cfg.dim, k);
        Self { cfg: cfg.clone(), ppm, ppm_bottleneck, laterals, fpn_convs, fuse }
    }

    fn pyramid_pooling<'g, T: Scalar>(&self, x: FeatureMap<'g, T>) -> FeatureMap<'g, T> {
        let (h, w) = (x.height, x.width);
        let mut parts = vec![x.x];
        for (&scale, conv) in self.cfg.pool_scales.iter().zip(&self.ppm) {
            let pooled = x.x.resample(Rc::new(SparseMatrix::adaptive_avg_pool(h, w, scale, scale)));
            let ctx = FeatureMap::new(conv.forward(pooled).relu(), scale, scale);
            parts.push(resize(ctx, h, w, false).x);
        }
        let cat = FeatureMap::new(Var::concat(&parts, 1), h, w);
        let out = self.ppm_bottleneck.forward(cat);
        FeatureMap::new(out.x.relu(), h, w)
    }

    pub fn forward<'g, T: Scalar>(&self, levels: &[FeatureMap<'g, T>]) -> Result<UniversalRepresentation<'g, T>> {
        if levels.len() != self.laterals.len() + 1 {
            return Err(Error::Shape(format!(
                "decoder expects {} levels, got {}",
                self.laterals.len() + 1,
                levels.len()
            )));
        }
        for pair in levels.windows(2) {
            if pair[1].height >= pair[0].height || pair[1].width >= pair[0].width {
                return Err(Error::Shape(format!(
                    "level sizes must strictly decrease, got {}x{} then {}x{}",
                    pair[0].height, pair[0].width, pair[1].height, pair[1].width
                )));
            }
        }
        let n = levels.len();
        let mut lat: Vec<FeatureMap<'g, T>> = levels[..n - 1]
            .iter()
            .zip(&self.laterals)
            .map(|(l, p)| FeatureMap::new(p.forward(l.x).relu(), l.height, l.width))
            .collect();
        lat.push(self.pyramid_pooling(levels[n - 1]));
        for i in (1..n).rev() {
            let up = resize(lat[i], lat[i - 1].height, lat[i - 1].width, true);
            lat[i - 1] = FeatureMap::new(lat[i - 1].x.add(up.x), up.height, up.width);
        }
        let (h0, w0) = (lat[0].height, lat[0].width);
        let mut outs: Vec<Var<'g, T>> = Vec::with_capacity(n);
        for (i, l) in lat.iter().enumerate() {
            let fm = if i < n - 1 {
                let o = self.fpn_convs[i].forward(*l);
                FeatureMap::new(o.x.relu(), o.height, o.width)
            } else {
                *l
            };
            outs.push(resize(fm, h0, w0, false).x);
        }
        let fused = self.fuse.forward(FeatureMap::new(Var::concat(&outs, 1), h0, w0));
        let mut y = FeatureMap::new(fused.x.relu(), h0, w0);
        if self.cfg.stride == 1 {
            y = resize(y, h0 * 4, w0 * 4, false);
        }
        Ok(UniversalRepresentation { y })
    }
}

/// Per-pixel class logits upsampled to the input size.
#[derive(Clone, Debug)]
pub struct CdHead {
    pub classifier: Linear,
    pub num_classes: usize,
}

impl CdHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, dim: usize, num_classes: usize) -> Self {
        let mut s = init.scope("cd_head");
        Self {
            classifier: Linear::new(&mut s, "classifier", dim, num_classes, WeightInit::TruncNormal(0.02)),
            num_classes,
        }
    }

    /// Logits `[height*width, C]`; softmax of a row is the class distribution.
    pub fn logits<'g, T: Scalar>(
        &self,
        rep: &UniversalRepresentation<'g, T>,
        height: usize,
        width: usize,
    ) -> Var<'g, T> {
        let y = rep.y;
        let logits = FeatureMap::new(self.classifier.forward(y.x), y.height, y.width);
        resize(logits, height, width, false).x
    }

    pub fn probabilities<'g, T: Scalar>(
        &self,
        rep: &UniversalRepresentation<'g, T>,
        height: usize,
        width: usize,
    ) -> Var<'g, T> {
        self.logits(rep, height, width).softmax_last()
    }
}

fn split_heads<'g, T: Scalar>(x: Var<'g, T>, heads: usize) -> Var<'g, T> {
    let (t, d) = (x.dim(0), x.dim(1));
    x.reshape([t, heads, d / heads]).permute(&[1, 0, 2])
}

fn merge_heads<'g, T: Scalar>(x: Var<'g, T>) -> Var<'g, T> {
    let (h, t, dh) = (x.dim(0), x.dim(1), x.dim(2));
    x.permute(&[1, 0, 2]).reshape([t, h * dh])
}

/// Multi-head attention with separate query and key/value sources.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Projected keys and values of an attended sequence.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues<'g, T: Scalar> {
    pub k: Var<'g, T>,
    pub v: Var<'g, T>,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = init.scope(name);
        let std = WeightInit::TruncNormal(0.02);
        Self {
            q: Linear::new(&mut s, "q", dim, dim, std),
            k: Linear::new(&mut s, "k", dim, dim, std),
            v: Linear::new(&mut s, "v", dim, dim, std),
            out: Linear::new(&mut s, "out", dim, dim, std),
            heads,
        }
    }

    pub fn key_values<'g, T: Scalar>(&self, source: Var<'g, T>) -> KeyValues<'g, T> {
        KeyValues { k: self.k.forward(source), v: self.v.forward(source) }
    }

    /// Head-merged attention context `[tq, d]` before the output projection,
    /// with the weights `[heads, tq, tk]`. `mask` is an additive `[tq, tk]` term.
    pub fn context<'g, T: Scalar>(
        &self,
        query: Var<'g, T>,
        kv: KeyValues<'g, T>,
        mask: Option<&Tensor<T>>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let g = query.graph();
        let h = self.heads;
        let dh = query.dim(1) / h;
        let q = split_heads(self.q.forward(query), h).scale(c(1.0 / (dh as f64).sqrt()));
        let (k, v) = (split_heads(kv.k, h), split_heads(kv.v, h));
        let mut scores = q.bmm(k, false, true);
        if let Some(m) = mask {
            scores = scores.add(g.constant(m.clone()));
        }
        let attn = scores.softmax_last();
        (merge_heads(attn.bmm(v, false, false)), attn)
    }

    pub fn attend<'g, T: Scalar>(
        &self,
        query: Var<'g, T>,
        kv: KeyValues<'g, T>,
        mask: Option<&Tensor<T>>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let (ctx, attn) = self.context(query, kv, mask);
        (self.out.forward(ctx), attn)
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention, MLP.
#[derive(Clone, Debug)]
pub struct CaptionLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm3: LayerNorm,
}

fn causal_mask<T: Scalar>(t: usize) -> Tensor<T> {
    let data = (0..t * t).map(|i| if i % t > i / t { T::neg_infinity() } else { T::zero() }).collect();
    Tensor::from_vec([t, t], data)
}

impl CaptionLayer {
    fn new<T: Scalar>(init: &mut Init<'_, T>, name: &str, cfg: &DecoderConfig) -> Self {
        let mut s = init.scope(name);
        let d = cfg.dim;
        Self {
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d, cfg.text_heads),
            norm1: LayerNorm::new(&mut s, "norm1", d),
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", d, cfg.text_heads),
            norm2: LayerNorm::new(&mut s, "norm2", d),
            fc1: Linear::new(&mut s, "mlp.fc1", d, d * cfg.mlp_ratio, WeightInit::Kaiming),
            fc2: Linear::new(&mut s, "mlp.fc2", d * cfg.mlp_ratio, d, WeightInit::TruncNormal(0.02)),
            norm3: LayerNorm::new(&mut s, "norm3", d),
        }
    }

    fn forward<'g, T: Scalar>(
        &self,
        z: Var<'g, T>,
        memory: KeyValues<'g, T>,
        mask: &Tensor<T>,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let (sa, _) = self.self_attn.attend(z, self.self_attn.key_values(z), Some(mask));
        let z = self.norm1.forward(z.add(sa));
        let (ca, attn) = self.cross_attn.attend(z, memory, None);
        let z = self.norm2.forward(z.add(ca));
        let mlp = self.fc2.forward(self.fc1.forward(z).relu());
        (self.norm3.forward(z.add(mlp)), attn)
    }
}

/// Image tokens projected once per sample and the per-layer keys/values.
#[derive(Clone, Debug)]
pub struct CaptionMemory<'g, T: Scalar> {
    pub tokens: Var<'g, T>,
    pub layers: Vec<KeyValues<'g, T>>,
    pub height: usize,
    pub width: usize,
}

/// Sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = (10000f64).powf((2 * (i / 2)) as f64 / dim as f64);
            let a = pos as f64 / freq;
            data.push(c(if i % 2 == 0 { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec([len, dim], data)
}

/// Autoregressive word decoder over the shared representation.
#[derive(Clone, Debug)]
pub struct CaptionHead {
    pub image_proj: Linear,
    pub embed: Embedding,
    pub layers: Vec<CaptionLayer>,
    pub classifier: Linear,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dim: usize,
}

/// Greedy decoding result with the cross-attention of each emitted word.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// `START` followed by the emitted ids (END included when produced).
    pub ids: Vec<usize>,
    /// Head-averaged last-layer cross-attention over image tokens, one per emitted id.
    pub attention: Vec<Vec<f64>>,
}

impl CaptionHead {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cfg: &DecoderConfig, vocab_size: usize, max_len: usize) -> Self {
        let mut s = init.scope("cc_head");
        let d = cfg.dim;
        Self {
            image_proj: Linear::new(&mut s, "image_proj", d, d, WeightInit::Kaiming),
            embed: Embedding::new(&mut s, "embed", vocab_size, d, WeightInit::TruncNormal(1.0)),
            layers: (0..cfg.text_layers).map(|i| CaptionLayer::new(&mut s, &format!("layers.{i}"), cfg)).collect(),
            classifier: Linear::new(&mut s, "classifier", d, vocab_size, WeightInit::TruncNormal(0.02)),
            vocab_size,
            max_len,
            dim: d,
        }
    }

    pub fn memory<'g, T: Scalar>(&self, rep: &UniversalRepresentation<'g, T>) -> CaptionMemory<'g, T> {
        let tokens = self.image_proj.forward(rep.y.x);
        CaptionMemory {
            tokens,
            layers: self.layers.iter().map(|l| l.cross_attn.key_values(tokens)).collect(),
            height: rep.y.height,
            width: rep.y.width,
        }
    }

    /// Teacher-forced logits `[t, N]` for the given prefix and the last
    /// layer's cross-attention `[heads, t, P]`.
    pub fn logits<'g, T: Scalar>(
        &self,
        g: &'g Graph<'g, T>,
        memory: &CaptionMemory<'g, T>,
        ids: &[usize],
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        if ids.is_empty() {
            return Err(Error::Contract("caption head needs at least one token".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let t = ids.len();
        let mut z = self.embed.forward(g, ids).add(g.constant(sinusoidal_positions(t, self.dim)));
        let mask = causal_mask(t);
        let mut attn = None;
        for (layer, kv) in self.layers.iter().zip(&memory.layers) {
            let (next, a) = layer.forward(z, *kv, &mask);
            z = next;
            attn = Some(a);
        }
        Ok((self.classifier.forward(z), attn.expect("at least one layer")))
    }

    /// Next-word distribution after `ids`.
    pub fn step<'g, T: Scalar>(
        &self,
        g: &'g Graph<'g, T>,
        memory: &CaptionMemory<'g, T>,
        ids: &[usize],
    ) -> Result<Tensor<T>> {
        let (logits, _) = self.logits(g, memory, ids)?;
        Ok(logits.narrow(0, ids.len() - 1, 1).reshape([self.vocab_size]).softmax_last().value().as_ref().clone())
    }

    /// Argmax decoding from START until END or `max_len` tokens.
    pub fn greedy_decode<'g, T: Scalar>(
        &self,
        g: &'g Graph<'g, T>,
        memory: &CaptionMemory<'g, T>,
        max_len: usize,
    ) -> Result<Decoded> {
        let mut ids = vec![START];
        let mut attention = Vec::new();
        while ids.len() < max_len {
            let (logits, attn) = self.logits(g, memory, &ids)?;
            let last = logits.narrow(0, ids.len() - 1, 1).value();
            let next = last.argmax_rows()[0];
            let a = attn.value();
            let (heads, t, p) = (a.dim(0), a.dim(1), a.dim(2));
            let mut avg = vec![0.0; p];
            for h in 0..heads {
                let row = &a.data()[(h * t + t - 1) * p..(h * t + t) * p];
                for (o, v) in avg.iter_mut().zip(row) {
                    *o += v.as_f64() / heads as f64;
                }
            }
            ids.push(next);
            attention.push(avg);
            if next == END {
                break;
            }
        }
        Ok(Decoded { ids, attention })
    }
}
