//! The assembled network: Siamese encoder, ChangeLSTM, fused decoder and the
//! two task heads.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::changelstm::{ChangeLstm, LevelLayout};
use crate::config::{LossMode, RunConfig};
use crate::data::{Batch, PAD};
use crate::encoder::{FeatureMap, SiameseEncoder};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};
use crate::predictor::{CaptionHead, CdHead, Decoded, UnifiedDecoder, UniversalRepresentation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct ChangeMinds<T: Scalar> {
    pub config: RunConfig,
    pub vocab_size: usize,
    pub params: ParamStore<T>,
    pub encoder: SiameseEncoder,
    pub changelstm: ChangeLstm,
    pub decoder: UnifiedDecoder,
    pub cd_head: CdHead,
    pub cc_head: CaptionHead,
    representation_calls: Cell<usize>,
}

/// Per-sample outputs of one multitask forward.
#[derive(Clone, Debug)]
pub struct SampleOutput<'g, T: Scalar> {
    /// `[H*W, C]` change-map logits.
    pub cd_logits: Option<Var<'g, T>>,
    /// `[max_len - 1, N]` teacher-forced word logits.
    pub cc_logits: Option<Var<'g, T>>,
}

#[derive(Clone, Debug)]
pub struct MultitaskOutput<'g, T: Scalar> {
    pub samples: Vec<SampleOutput<'g, T>>,
}

impl<'g, T: Scalar> MultitaskOutput<'g, T> {
    /// Change logits of the whole batch stacked to `[B*H*W, C]`.
    pub fn cd_logits(&self) -> Option<Var<'g, T>> {
        let parts: Option<Vec<_>> = self.samples.iter().map(|s| s.cd_logits).collect();
        parts.filter(|p| !p.is_empty()).map(|p| Var::concat(&p, 0))
    }

    /// Word logits of the whole batch stacked to `[B*(max_len-1), N]`.
    pub fn cc_logits(&self) -> Option<Var<'g, T>> {
        let parts: Option<Vec<_>> = self.samples.iter().map(|s| s.cc_logits).collect();
        parts.filter(|p| !p.is_empty()).map(|p| Var::concat(&p, 0))
    }
}

/// Inference result for one image pair.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// `[H*W, C]` class probabilities.
    pub probabilities: Tensor<T>,
    pub mask: Vec<usize>,
    pub caption: Decoded,
    /// Grid of the caption attention maps.
    pub attention_grid: (usize, usize),
}

impl<T: Scalar> ChangeMinds<T> {
    /// Builds a freshly initialised model; parameters are seeded from
    /// `config.train.seed`.
    pub fn new(config: &RunConfig, vocab_size: usize) -> Result<Self> {
        config.validate()?;
        if vocab_size < 4 {
            return Err(Error::Config(format!("vocabulary of {vocab_size} tokens lacks the special tokens")));
        }
        let enc = &config.encoder;
        let sizes = enc.level_sizes(config.data.image_size);
        let channels: Vec<usize> = enc.dims.iter().map(|d| 2 * d).collect();
        let layout = LevelLayout::new(sizes.iter().zip(&channels).map(|(&s, &ch)| (s, s, ch)).collect());

        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut init = Init::new(&mut params, &mut rng);
        let encoder = SiameseEncoder::new(&mut init, enc);
        let changelstm = ChangeLstm::new(&mut init, &config.lstm, layout);
        let decoder = UnifiedDecoder::new(&mut init, &config.decoder, &channels);
        let cd_head = CdHead::new(&mut init, config.decoder.dim, config.data.num_classes);
        let cc_head = CaptionHead::new(&mut init, &config.decoder, vocab_size, config.data.max_caption_len);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            params,
            encoder,
            changelstm,
            decoder,
            cd_head,
            cc_head,
            representation_calls: Cell::new(0),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cd_head.num_classes
    }

    /// Number of times the shared representation has been computed.
    pub fn representation_calls(&self) -> usize {
        self.representation_calls.get()
    }

    /// Encoder, ChangeLSTM and decoder for one image pair.
    pub fn representation<'g>(
        &self,
        g: &'g Graph<'g, T>,
        image_t1: &Tensor<T>,
        image_t2: &Tensor<T>,
    ) -> Result<UniversalRepresentation<'g, T>> {
        self.representation_calls.set(self.representation_calls.get() + 1);
        let pyramid = self.encoder.siamese_forward(g, image_t1, image_t2)?;
        let levels = self.changelstm.forward(&pyramid)?;
        self.decoder.forward(&levels)
    }

    /// One representation per sample feeding whichever heads `mode` trains.
    pub fn forward_multitask<'g>(
        &self,
        g: &'g Graph<'g, T>,
        batch: &Batch<T>,
        mode: LossMode,
    ) -> Result<MultitaskOutput<'g, T>> {
        let mut samples = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let (t1, t2) = batch.images(i);
            let rep = self.representation(g, &t1, &t2)?;
            let cd_logits = mode.trains_cd().then(|| self.cd_head.logits(&rep, batch.height, batch.width));
            let cc_logits = if mode.trains_cc() {
                let ids = &batch.caption_ids[i];
                let input = &ids[..ids.len().saturating_sub(1)];
                let rep = if self.config.decoder.detach_caption_input {
                    UniversalRepresentation { y: FeatureMap::new(rep.y.x.detach(), rep.y.height, rep.y.width) }
                } else {
                    rep
                };
                let memory = self.cc_head.memory(&rep);
                Some(self.cc_head.logits(g, &memory, input)?.0)
            } else {
                None
            };
            samples.push(SampleOutput { cd_logits, cc_logits });
        }
        Ok(MultitaskOutput { samples })
    }

    /// Change map and greedy caption for one pair, without gradients.
    pub fn predict(&self, image_t1: &Tensor<T>, image_t2: &Tensor<T>) -> Result<Prediction<T>> {
        let (h, w) = (image_t1.dim(1), image_t1.dim(2));
        let g = Graph::inference(&self.params);
        let rep = self.representation(&g, image_t1, image_t2)?;
        let probabilities = self.cd_head.probabilities(&rep, h, w).value().as_ref().clone();
        let mask = probabilities.argmax_rows();
        let memory = self.cc_head.memory(&rep);
        let caption = self.cc_head.greedy_decode(&g, &memory, self.config.decoder.max_decode_len)?;
        Ok(Prediction { probabilities, mask, caption, attention_grid: (memory.height, memory.width) })
    }

    /// Teacher-forced word predictions of non-PAD targets: `(correct, total)`.
    pub fn teacher_forced_hits(cc_logits: &Tensor<T>, targets: &[usize]) -> (usize, usize) {
        let pred = cc_logits.argmax_rows();
        targets
            .iter()
            .zip(pred)
            .filter(|(&t, _)| t != PAD)
            .fold((0, 0), |(hit, n), (&t, p)| (hit + usize::from(t == p), n + 1))
    }
}
