use rand::Rng;

use super::{BiTemporalSample, PAD};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stacked samples. Images are `[B, 3, H, W]`, masks `[B, H*W]` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub sample_ids: Vec<String>,
    pub images_t1: Tensor<T>,
    pub images_t2: Tensor<T>,
    pub masks: Vec<usize>,
    /// One PAD-filled caption per sample, `[B, max_len]`.
    pub caption_ids: Vec<Vec<usize>>,
    /// Caption lengths including START and END.
    pub caption_lengths: Vec<usize>,
    /// All tokenised references per sample.
    pub references: Vec<Vec<Vec<String>>>,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    /// Image pair of sample `i`, each `[3, H, W]`.
    pub fn images(&self, i: usize) -> (Tensor<T>, Tensor<T>) {
        let n = 3 * self.height * self.width;
        let shape = [3, self.height, self.width];
        (
            Tensor::from_vec(shape, self.images_t1.data()[i * n..(i + 1) * n].to_vec()),
            Tensor::from_vec(shape, self.images_t2.data()[i * n..(i + 1) * n].to_vec()),
        )
    }

    pub fn mask(&self, i: usize) -> &[usize] {
        let n = self.height * self.width;
        &self.masks[i * n..(i + 1) * n]
    }
}

fn assemble<T: Scalar>(samples: &[&BiTemporalSample], chosen: Vec<usize>, max_len: usize) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::Collate("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    for s in samples {
        if s.image_t1.shape() != [3, h, w] || s.image_t2.shape() != [3, h, w] {
            return Err(Error::Collate(format!(
                "sample `{}` has shape {:?}, batch expects [3, {h}, {w}]",
                s.sample_id,
                s.image_t1.shape()
            )));
        }
    }
    let mut t1 = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut t2 = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    let mut caption_ids = Vec::with_capacity(samples.len());
    let mut caption_lengths = Vec::with_capacity(samples.len());
    for (s, &c) in samples.iter().zip(&chosen) {
        t1.extend(s.image_t1.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
        t2.extend(s.image_t2.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
        masks.extend(s.mask.iter().map(|&m| m as usize));
        let mut ids = s.captions[c].clone();
        ids.truncate(max_len);
        caption_lengths.push(ids.len());
        ids.resize(max_len, PAD);
        caption_ids.push(ids);
    }
    let b = samples.len();
    Ok(Batch {
        sample_ids: samples.iter().map(|s| s.sample_id.clone()).collect(),
        images_t1: Tensor::from_vec([b, 3, h, w], t1),
        images_t2: Tensor::from_vec([b, 3, h, w], t2),
        masks,
        caption_ids,
        caption_lengths,
        references: samples.iter().map(|s| s.references.clone()).collect(),
        height: h,
        width: w,
    })
}

/// Training batch: one caption per sample, drawn uniformly with `rng`.
pub fn collate<T: Scalar>(samples: &[&BiTemporalSample], max_len: usize, rng: &mut impl Rng) -> Result<Batch<T>> {
    let chosen = samples.iter().map(|s| rng.random_range(0..s.captions.len().max(1))).collect();
    assemble(samples, chosen, max_len)
}

/// Evaluation batch: the first caption is teacher-forced, all references kept.
pub fn collate_eval<T: Scalar>(samples: &[&BiTemporalSample], max_len: usize) -> Result<Batch<T>> {
    assemble(samples, vec![0; samples.len()], max_len)
}
