//! Samples, captions and vocabulary.

mod batch;
mod levir;
mod synth;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{collate, collate_eval, Batch};
pub use levir::{
    build_vocabulary, load_levir_mci, load_split, read_image, read_mask, write_levir_mci, CaptionEntry, CaptionFile,
    DatasetManifest, Sentence,
};
pub use synth::{generate_synthetic, ChangeKind, SynthSample, SynthSpec};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercases, replaces punctuation with spaces and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|ch| if ch.is_alphanumeric() || ch.is_whitespace() { ch } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Token/id mapping with ids 0..4 reserved for PAD, START, END and UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        if f.tokens.len() < SPECIALS.len() || f.tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Validation("vocabulary must start with the four special tokens".into()));
        }
        let mut token_to_id = HashMap::new();
        for (i, t) in f.tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { id_to_token: f.tokens, token_to_id })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.id_to_token }
    }
}

impl Vocabulary {
    /// Specials followed by the sorted distinct corpus tokens.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>) -> Self {
        let words: BTreeSet<&str> =
            sentences.into_iter().flatten().map(String::as_str).filter(|w| !SPECIALS.contains(w)).collect();
        let id_to_token: Vec<String> = SPECIALS.iter().copied().chain(words).map(str::to_string).collect();
        let token_to_id = id_to_token.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Words of an id sequence: specials are dropped and END stops reading.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != END)
            .filter(|&&i| i > UNK)
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `START body END`, body truncated to `max_len - 2`, PAD-filled to `max_len`.
pub fn encode_caption(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 2, "max_len must leave room for START and END");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(START);
    ids.extend(tokens.iter().take(max_len - 2).map(|t| vocab.id(t)));
    ids.push(END);
    ids.resize(max_len, PAD);
    ids
}

/// One bi-temporal record. Images are `[3, H, W]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    pub sample_id: String,
    pub image_t1: Tensor<f32>,
    pub image_t2: Tensor<f32>,
    /// Class ids, row-major `[H, W]`.
    pub mask: Vec<u8>,
    /// Encoded captions, `START ... END` without padding.
    pub captions: Vec<Vec<usize>>,
    /// Tokenised reference sentences.
    pub references: Vec<Vec<String>>,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.image_t1.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image_t1.dim(2)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image_t1.shape() != self.image_t2.shape() || self.image_t1.rank() != 3 || self.image_t1.dim(0) != 3 {
            return Err(Error::Validation(format!(
                "sample `{}`: image shapes {:?} / {:?}",
                self.sample_id,
                self.image_t1.shape(),
                self.image_t2.shape()
            )));
        }
        if self.mask.len() != self.height() * self.width() {
            return Err(Error::Validation(format!("sample `{}`: mask size mismatch", self.sample_id)));
        }
        if let Some(&v) = self.mask.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Validation(format!(
                "sample `{}`: mask value {v} not below class count {num_classes}",
                self.sample_id
            )));
        }
        if self.captions.is_empty() {
            return Err(Error::Validation(format!("sample `{}` has no captions", self.sample_id)));
        }
        for c in &self.captions {
            if c.first() != Some(&START) || c.last() != Some(&END) {
                return Err(Error::Validation(format!("sample `{}`: caption not framed by START/END", self.sample_id)));
            }
        }
        Ok(())
    }
}

/// Encodes tokenised captions without padding.
pub(crate) fn frame_caption(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let body = tokens.len().min(max_len - 2);
    encode_caption(tokens, vocab, max_len)[..body + 2].to_vec()
}

pub(crate) fn rgb_to_tensor(pixels: &[u8], height: usize, width: usize) -> Tensor<f32> {
    let hw = height * width;
    let mut data = vec![0.0f32; 3 * hw];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * hw + i] = f32::from(px[ch]) / 255.0;
        }
    }
    Tensor::from_vec([3, height, width], data)
}
