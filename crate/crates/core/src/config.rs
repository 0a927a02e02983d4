//! Run configuration: model, data and optimisation settings.
//!
//! Config files are TOML restricted to flat dotted keys
//! (`encoder.window = 4`). Every key has a default, unknown keys are rejected
//! with the list of valid ones, and CLI overrides use the same key names.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub dims: Vec<usize>,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Zero-pad feature maps up to a multiple of the window size.
    pub pad_to_window: bool,
    pub init_std: f64,
    /// Per-channel input normalisation `(x - mean) / std`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            dims: vec![96, 192, 384, 768],
            depths: vec![2, 2, 6, 2],
            heads: vec![3, 6, 12, 24],
            window: 7,
            mlp_ratio: 4,
            pad_to_window: true,
            init_std: 0.02,
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl EncoderConfig {
    /// Desk-scale backbone used by the tiny preset and tests.
    pub fn tiny() -> Self {
        Self { dims: vec![16, 32, 64, 128], depths: vec![2; 4], heads: vec![1, 2, 4, 8], window: 4, ..Self::default() }
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let four = |name: &str, v: &[usize]| {
            if v.len() != 4 {
                Err(Error::Config(format!("encoder.{name} needs 4 entries, got {}", v.len())))
            } else {
                Ok(())
            }
        };
        four("dims", &self.dims)?;
        four("depths", &self.depths)?;
        four("heads", &self.heads)?;
        if self.mean.len() != 3 || self.std.len() != 3 {
            return Err(Error::Config("encoder.mean and encoder.std need 3 entries".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("encoder.std must be positive".into()));
        }
        for (l, (&d, &h)) in self.dims.iter().zip(&self.heads).enumerate() {
            if h == 0 || d % h != 0 {
                return Err(Error::Config(format!("stage {} dim {d} not divisible by {h} heads", l + 1)));
            }
        }
        if self.window == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("encoder.window, patch_size and mlp_ratio must be positive".into()));
        }
        let unit = self.patch_size * 8;
        if image_size == 0 || !image_size.is_multiple_of(unit) {
            return Err(Error::Shape(format!(
                "image size {image_size} must be a positive multiple of patch_size x 8 = {unit}"
            )));
        }
        Ok(())
    }

    /// Spatial side of each pyramid level for a square input.
    pub fn level_sizes(&self, image_size: usize) -> [usize; 4] {
        let s1 = image_size / self.patch_size;
        [s1, s1 / 2, s1 / 4, s1 / 8]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChangeLstmConfig {
    /// Unified hidden dimension of the flattened sequence.
    pub dim: usize,
    /// Depth L; the module runs 2L blocks. 0 disables the module.
    pub depth: usize,
    pub heads: usize,
    /// Kernel of the causal depthwise convolution (1 = pointwise).
    pub conv_kernel: usize,
}

impl Default for ChangeLstmConfig {
    fn default() -> Self {
        Self { dim: 256, depth: 2, heads: 4, conv_kernel: 1 }
    }
}

impl ChangeLstmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth > 0 {
            if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
                return Err(Error::Config(format!(
                    "lstm.dim {} must be a positive multiple of lstm.heads {}",
                    self.dim, self.heads
                )));
            }
            if self.conv_kernel == 0 {
                return Err(Error::Config("lstm.conv_kernel must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channel width of the fused representation.
    pub dim: usize,
    pub pool_scales: Vec<usize>,
    /// Resolution of the fused map relative to the input: 4 or 1.
    pub stride: usize,
    /// Kernel of the FPN output / fusion convolutions (1 or 3).
    pub fuse_kernel: usize,
    pub text_heads: usize,
    pub text_layers: usize,
    pub mlp_ratio: usize,
    /// Greedy decoding cap, counted in tokens including START.
    pub max_decode_len: usize,
    /// Route the caption head through a detached copy of the fused map.
    pub detach_caption_input: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            dim: 512,
            pool_scales: vec![1, 2, 3, 6],
            stride: 4,
            fuse_kernel: 3,
            text_heads: 8,
            text_layers: 1,
            mlp_ratio: 4,
            max_decode_len: 40,
            detach_caption_input: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return Err(Error::Config(format!("decoder.dim {} must be a positive multiple of 4", self.dim)));
        }
        if !matches!(self.stride, 1 | 4) {
            return Err(Error::Config(format!("decoder.stride must be 1 or 4, got {}", self.stride)));
        }
        if !matches!(self.fuse_kernel, 1 | 3) {
            return Err(Error::Config(format!("decoder.fuse_kernel must be 1 or 3, got {}", self.fuse_kernel)));
        }
        if self.pool_scales.is_empty() || self.pool_scales.contains(&0) {
            return Err(Error::Config("decoder.pool_scales must be non-empty and positive".into()));
        }
        if self.text_heads == 0 || !self.dim.is_multiple_of(self.text_heads) {
            return Err(Error::Config(format!(
                "decoder.dim {} not divisible by text_heads {}",
                self.dim, self.text_heads
            )));
        }
        if self.text_layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("decoder.text_layers and mlp_ratio must be positive".into()));
        }
        if self.max_decode_len < 2 {
            return Err(Error::Config("decoder.max_decode_len must be >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root in the LEVIR-MCI layout; empty when unset.
    pub root: String,
    pub image_size: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Raw mask byte for each class id; empty means identity.
    pub mask_values: Vec<u8>,
    pub max_caption_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            image_size: 256,
            num_classes: 3,
            class_names: vec!["background".into(), "building".into(), "road".into()],
            mask_values: Vec::new(),
            max_caption_len: 40,
        }
    }
}

/// Which heads contribute to the optimised loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    CdOnly,
    CcOnly,
    Multitask,
}

impl LossMode {
    pub fn trains_cd(self) -> bool {
        !matches!(self, LossMode::CcOnly)
    }

    pub fn trains_cc(self) -> bool {
        !matches!(self, LossMode::CdOnly)
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::CdOnly => "cd_only",
            LossMode::CcOnly => "cc_only",
            LossMode::Multitask => "multitask",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cd_only" => Ok(LossMode::CdOnly),
            "cc_only" => Ok(LossMode::CcOnly),
            "multitask" => Ok(LossMode::Multitask),
            other => Err(Error::Config(format!("unknown loss mode `{other}` (cd_only, cc_only, multitask)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many optimiser steps when > 0.
    pub max_steps: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Evaluate every this many epochs (0 = only at the end).
    pub eval_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            max_steps: 0,
            lr: 1e-4,
            min_lr: 1e-7,
            batch_size: 8,
            seed: 42,
            loss_mode: LossMode::Multitask,
            eval_interval: 1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = self.min_lr >= 0.0 && self.min_lr <= self.lr;
        if !ordered || self.lr <= 0.0 {
            return Err(Error::Config(format!("need 0 <= train.min_lr ({}) <= train.lr ({})", self.min_lr, self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return Err(Error::Config("train.epochs or train.max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a run needs, resolvable before any compute starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub lstm: ChangeLstmConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// CPU preset: 64x64 images, 4-stage [16,32,64,128] backbone with
    /// window 4, ChangeLSTM width 64 with L = 1, fused width 128.
    pub fn tiny() -> Self {
        Self {
            data: DataConfig { image_size: 64, max_caption_len: 24, ..DataConfig::default() },
            encoder: EncoderConfig::tiny(),
            lstm: ChangeLstmConfig { dim: 64, depth: 1, heads: 4, conv_kernel: 1 },
            decoder: DecoderConfig {
                dim: 128,
                fuse_kernel: 1,
                text_heads: 4,
                max_decode_len: 24,
                ..DecoderConfig::default()
            },
            train: TrainConfig { batch_size: 4, lr: 3e-3, min_lr: 1e-5, epochs: 2, ..TrainConfig::default() },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "default" | "swin-t" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset `{other}` (tiny, default)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.data.image_size)?;
        self.lstm.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        if self.data.num_classes < 2 {
            return Err(Error::Config("data.num_classes must be >= 2".into()));
        }
        if !self.data.class_names.is_empty() && self.data.class_names.len() != self.data.num_classes {
            return Err(Error::Config(format!(
                "data.class_names has {} entries for {} classes",
                self.data.class_names.len(),
                self.data.num_classes
            )));
        }
        if !self.data.mask_values.is_empty() && self.data.mask_values.len() != self.data.num_classes {
            return Err(Error::Config("data.mask_values must list one byte per class".into()));
        }
        if self.data.max_caption_len < 2 {
            return Err(Error::Config("data.max_caption_len must be >= 2".into()));
        }
        Ok(())
    }

    /// All valid dotted keys with their default values.
    pub fn valid_keys() -> Vec<String> {
        flatten(&toml::Value::try_from(RunConfig::default()).expect("config serialises")).into_keys().collect()
    }

    /// Parses a flat dotted-key TOML document on top of `base`.
    pub fn from_toml_str(text: &str, base: &RunConfig) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid config file: {e}")))?;
        let overrides = flatten(&toml::Value::Table(doc));
        base.with_overrides(overrides)
    }

    /// Applies `key=value` overrides; values use TOML syntax, bare words are
    /// taken as strings.
    pub fn with_assignments<'a>(&self, assignments: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for a in assignments {
            let (k, v) = a
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{a}` is not of the form key=value")))?;
            map.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        self.with_overrides(map)
    }

    pub fn with_overrides(&self, overrides: BTreeMap<String, toml::Value>) -> Result<Self> {
        let mut flat = flatten(&toml::Value::try_from(self).expect("config serialises"));
        for (k, v) in overrides {
            let Some(slot) = flat.get_mut(&k) else {
                return Err(Error::Config(format!(
                    "unknown config key `{k}`; valid keys: {}",
                    Self::valid_keys().join(", ")
                )));
            };
            *slot = coerce(v, slot);
        }
        let cfg: RunConfig = unflatten(flat)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("invalid config value: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical flat `key = value` rendering, one key per line.
    pub fn to_flat_toml(&self) -> String {
        let flat = flatten(&toml::Value::try_from(self).expect("config serialises"));
        let mut out = String::new();
        for (k, v) in flat {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Content hash of the canonical rendering.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_flat_toml().as_bytes());
        hex::encode(&digest[..8])
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Integer literals are accepted where a float is expected.
fn coerce(v: toml::Value, like: &toml::Value) -> toml::Value {
    match (&v, like) {
        (toml::Value::Integer(i), toml::Value::Float(_)) => toml::Value::Float(*i as f64),
        (toml::Value::Array(items), toml::Value::Array(proto)) if proto.first().is_some_and(|p| p.is_float()) => {
            toml::Value::Array(items.iter().map(|x| coerce(x.clone(), &proto[0])).collect())
        }
        _ => v,
    }
}

fn flatten(value: &toml::Value) -> BTreeMap<String, toml::Value> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

fn unflatten(flat: BTreeMap<String, toml::Value>) -> toml::Value {
    let mut root = toml::Table::new();
    for (key, v) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().unwrap();
        let mut table = &mut root;
        for p in parts {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("nested table");
        }
        table.insert(last.to_string(), v);
    }
    toml::Value::Table(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_reported_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!(c.lstm.dim, 256);
        assert_eq!(c.lstm.depth, 2);
        assert_eq!(c.decoder.dim, 512);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.train.min_lr, 1e-7);
        assert_eq!(c.train.seed, 42);
        assert_eq!(c.train.epochs, 50);
        c.validate().unwrap();
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn dotted_keys_round_trip() {
        let text = "encoder.window = 2\ntrain.lr = 1\ntrain.loss_mode = \"cd_only\"\nlstm.depth = 0\n";
        let c = RunConfig::from_toml_str(text, &RunConfig::tiny()).unwrap();
        assert_eq!(c.encoder.window, 2);
        assert_eq!(c.train.lr, 1.0);
        assert_eq!(c.train.loss_mode, LossMode::CdOnly);
        assert_eq!(c.lstm.depth, 0);
        let again = RunConfig::from_toml_str(&c.to_flat_toml(), &RunConfig::default()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::tiny().with_assignments(["encoder.windw=3"]).unwrap_err().to_string();
        assert!(err.contains("encoder.windw"));
        assert!(err.contains("encoder.window"));
        assert!(err.contains("train.loss_mode"));
    }

    #[test]
    fn assignments_parse_values() {
        let c = RunConfig::tiny()
            .with_assignments(["train.loss_mode=multitask", "decoder.pool_scales=[1,2]", "train.lr=0.5"])
            .unwrap();
        assert_eq!(c.decoder.pool_scales, vec![1, 2]);
        assert_eq!(c.train.lr, 0.5);
        assert!(RunConfig::tiny().with_assignments(["train.min_lr=1.0"]).is_err());
        assert!(RunConfig::tiny().with_assignments(["data.image_size=60"]).is_err());
    }
}
