//! Checkpoint container: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header and the concatenated little-endian tensor bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::ChangeMinds;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::Adam;

const MAGIC: &[u8; 8] = b"CMINDS01";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    step: usize,
    config_hash: String,
    config: String,
    vocab: Vocabulary,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub step: usize,
    pub config: RunConfig,
    pub config_hash: String,
    pub vocab: Vocabulary,
    pub params: BTreeMap<String, Tensor<T>>,
    pub adam_m: BTreeMap<String, Tensor<T>>,
    pub adam_v: BTreeMap<String, Tensor<T>>,
    pub optimizer_step: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(model: &ChangeMinds<T>, optimizer: Option<&Adam<T>>, vocab: &Vocabulary, step: usize) -> Self {
        let mut params = BTreeMap::new();
        let mut adam_m = BTreeMap::new();
        let mut adam_v = BTreeMap::new();
        for (id, name, value) in model.params.iter() {
            params.insert(name.to_string(), value.clone());
            if let Some((m, v)) = optimizer.and_then(|o| o.moments(id)) {
                adam_m.insert(name.to_string(), m.clone());
                adam_v.insert(name.to_string(), v.clone());
            }
        }
        Self {
            step,
            config: model.config.clone(),
            config_hash: model.config.hash(),
            vocab: vocab.clone(),
            params,
            adam_m,
            adam_v,
            optimizer_step: optimizer.map_or(0, |o| o.step_count()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut body = Vec::new();
        let groups = [("param/", &self.params), ("adam.m/", &self.adam_m), ("adam.v/", &self.adam_v)];
        for (prefix, map) in groups {
            for (name, t) in map {
                let bytes = T::to_le_bytes_vec(t.data());
                tensors.push(TensorEntry {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    offset: body.len(),
                    len: bytes.len(),
                });
                body.extend(bytes);
            }
        }
        let header = Header {
            dtype: T::DTYPE.to_string(),
            step: self.step,
            config_hash: self.config_hash.clone(),
            config: self.config.to_flat_toml(),
            vocab: self.vocab.clone(),
            optimizer_step: self.optimizer_step,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend(json);
        out.extend(body);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start =
            16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        if header.dtype != T::DTYPE {
            return Err(corrupt(&format!("stored as {}, requested {}", header.dtype, T::DTYPE)));
        }
        let config = RunConfig::from_toml_str(&header.config, &RunConfig::default())?;
        if config.hash() != header.config_hash {
            log::warn!("checkpoint config hash {} does not match its stored config", header.config_hash);
        }
        let body = &bytes[body_start..];
        let mut ckpt = Self {
            step: header.step,
            config,
            config_hash: header.config_hash,
            vocab: header.vocab,
            params: BTreeMap::new(),
            adam_m: BTreeMap::new(),
            adam_v: BTreeMap::new(),
            optimizer_step: header.optimizer_step,
        };
        for e in header.tensors {
            let raw = e
                .offset
                .checked_add(e.len)
                .and_then(|end| body.get(e.offset..end))
                .ok_or_else(|| corrupt(&format!("tensor `{}` out of bounds", e.name)))?;
            let data =
                T::from_le_bytes_slice(raw).ok_or_else(|| corrupt(&format!("tensor `{}` is malformed", e.name)))?;
            if data.len() != e.shape.iter().product::<usize>() {
                return Err(corrupt(&format!("tensor `{}` size does not match its shape", e.name)));
            }
            let t = Tensor::from_vec(e.shape, data);
            let (map, name) = if let Some(n) = e.name.strip_prefix("param/") {
                (&mut ckpt.params, n)
            } else if let Some(n) = e.name.strip_prefix("adam.m/") {
                (&mut ckpt.adam_m, n)
            } else if let Some(n) = e.name.strip_prefix("adam.v/") {
                (&mut ckpt.adam_v, n)
            } else {
                return Err(corrupt(&format!("unknown tensor group in `{}`", e.name)));
            };
            map.insert(name.to_string(), t);
        }
        Ok(ckpt)
    }

    /// Rebuilds the model and copies every stored parameter into it.
    pub fn to_model(&self) -> Result<ChangeMinds<T>> {
        let mut model = ChangeMinds::new(&self.config, self.vocab.len())?;
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let stored =
                self.params.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if stored.shape() != model.params.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    model.params.value(id).shape()
                )));
            }
            *model.params.value_mut(id) = stored.clone();
        }
        Ok(model)
    }

    /// Restores optimiser moments for the parameters of `model`.
    pub fn restore_optimizer(&self, model: &ChangeMinds<T>, optimizer: &mut Adam<T>) {
        for (id, name, _) in model.params.iter() {
            if let (Some(m), Some(v)) = (self.adam_m.get(name), self.adam_v.get(name)) {
                optimizer.set_moments(id, m.clone(), v.clone());
            }
        }
        optimizer.set_step_count(self.optimizer_step);
    }
}
