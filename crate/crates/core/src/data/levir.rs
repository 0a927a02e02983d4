//! LEVIR-MCI directory layout.
//!
//! ```text
//! root/{split}/A/<name>.png      pre-change image
//! root/{split}/B/<name>.png      post-change image
//! root/{split}/label/<name>.png  8-bit class-id mask
//! root/captions.json
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{frame_caption, rgb_to_tensor, tokenize, BiTemporalSample, SynthSample, Vocabulary};
use crate::config::DataConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub raw: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub filename: String,
    pub split: String,
    pub sentences: Vec<Sentence>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionFile {
    pub images: Vec<CaptionEntry>,
}

impl CaptionFile {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join("captions.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Tokenised sentences of one split, keyed by file name.
    pub fn split_sentences(&self, split: &str) -> HashMap<&str, Vec<Vec<String>>> {
        self.images
            .iter()
            .filter(|e| e.split == split)
            .map(|e| (e.filename.as_str(), e.sentences.iter().map(|s| tokenize(&s.raw)).collect()))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    /// File stems under `A/`, sorted.
    pub sample_ids: Vec<String>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Raw mask byte of each class id; empty means the byte is the id.
    pub mask_values: Vec<u8>,
}

impl DatasetManifest {
    pub fn scan(root: &Path, split: &str, num_classes: usize, class_names: Vec<String>) -> Result<Self> {
        let dir = root.join(split).join("A");
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut sample_ids = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    sample_ids.push(stem.to_string());
                }
            }
        }
        sample_ids.sort();
        Ok(Self {
            root: root.to_path_buf(),
            split: split.to_string(),
            sample_ids,
            num_classes,
            class_names,
            mask_values: Vec::new(),
        })
    }

    pub fn path(&self, folder: &str, id: &str) -> PathBuf {
        self.root.join(&self.split).join(folder).join(format!("{id}.png"))
    }

    fn class_of(&self, raw: u8) -> Option<u8> {
        if self.mask_values.is_empty() {
            ((raw as usize) < self.num_classes).then_some(raw)
        } else {
            self.mask_values.iter().position(|&v| v == raw).map(|c| c as u8)
        }
    }
}

/// Reads `split` of the dataset at `cfg.root` with the configured classes.
pub fn load_split(cfg: &DataConfig, split: &str, vocab: &Vocabulary) -> Result<Vec<BiTemporalSample>> {
    let root = Path::new(&cfg.root);
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(Error::Load {
            sample: split.to_string(),
            reason: format!("split directory {} not found", dir.display()),
        });
    }
    let mut manifest = DatasetManifest::scan(root, split, cfg.num_classes, cfg.class_names.clone())?;
    manifest.mask_values = cfg.mask_values.clone();
    if manifest.sample_ids.is_empty() {
        return Err(Error::Load {
            sample: split.to_string(),
            reason: format!("no images under {}", dir.join("A").display()),
        });
    }
    load_levir_mci(&manifest, vocab, cfg.max_caption_len)
}

/// Vocabulary over the sentences of one split of `captions.json`.
pub fn build_vocabulary(root: &Path, split: &str) -> Result<Vocabulary> {
    let captions = CaptionFile::read(root)?;
    let sentences = captions.split_sentences(split);
    if sentences.is_empty() {
        return Err(Error::Load { sample: split.to_string(), reason: "no captions for this split".into() });
    }
    let mut names: Vec<&&str> = sentences.keys().collect();
    names.sort();
    Ok(Vocabulary::build(names.iter().flat_map(|n| sentences[**n].iter().map(Vec::as_slice))))
}

/// RGB image as a `[3, H, W]` tensor in `[0, 1]` plus the raw pixels.
pub fn read_image(path: &Path) -> Result<(Tensor<f32>, RgbImage)> {
    if !path.exists() {
        return Err(Error::Load { sample: path.display().to_string(), reason: "file not found".into() });
    }
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok((rgb_to_tensor(img.as_raw(), h as usize, w as usize), img))
}

/// 8-bit label image mapped to class ids.
pub fn read_mask(path: &Path, cfg: &DataConfig) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::Load { sample: path.display().to_string(), reason: "file not found".into() });
    }
    let label = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?.to_luma8();
    label
        .as_raw()
        .iter()
        .map(|&v| {
            let class = if cfg.mask_values.is_empty() {
                ((v as usize) < cfg.num_classes).then_some(v)
            } else {
                cfg.mask_values.iter().position(|&m| m == v).map(|c| c as u8)
            };
            class.ok_or_else(|| {
                Error::Validation(format!("mask value {v} is not one of the {} configured classes", cfg.num_classes))
            })
        })
        .collect()
}

fn read_rgb(path: &Path, id: &str) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::Load { sample: id.to_string(), reason: format!("missing file {}", path.display()) });
    }
    image::open(path).map(|im| im.to_rgb8()).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Reads every sample of the manifest, remapping masks and encoding captions.
pub fn load_levir_mci(
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    max_caption_len: usize,
) -> Result<Vec<BiTemporalSample>> {
    let captions = CaptionFile::read(&manifest.root)?;
    let sentences = captions.split_sentences(&manifest.split);
    let mut out = Vec::with_capacity(manifest.sample_ids.len());
    for id in &manifest.sample_ids {
        let a = read_rgb(&manifest.path("A", id), id)?;
        let b = read_rgb(&manifest.path("B", id), id)?;
        if a.dimensions() != b.dimensions() {
            return Err(Error::Load {
                sample: id.clone(),
                reason: format!("image sizes differ: {:?} vs {:?}", a.dimensions(), b.dimensions()),
            });
        }
        let label_path = manifest.path("label", id);
        if !label_path.exists() {
            return Err(Error::Load { sample: id.clone(), reason: format!("missing file {}", label_path.display()) });
        }
        let label =
            image::open(&label_path).map_err(|e| Error::Image { path: label_path.clone(), source: e })?.to_luma8();
        if label.dimensions() != a.dimensions() {
            return Err(Error::Load { sample: id.clone(), reason: "mask size differs from image size".into() });
        }
        let mask = label
            .as_raw()
            .iter()
            .map(|&v| {
                manifest.class_of(v).ok_or_else(|| {
                    Error::Validation(format!(
                        "sample `{id}`: mask value {v} is not one of the {} configured classes",
                        manifest.num_classes
                    ))
                })
            })
            .collect::<Result<Vec<u8>>>()?;
        let file = format!("{id}.png");
        let refs = sentences.get(file.as_str()).cloned().unwrap_or_default();
        if refs.is_empty() {
            return Err(Error::Load { sample: id.clone(), reason: "no captions in captions.json".into() });
        }
        let (w, h) = a.dimensions();
        let sample = BiTemporalSample {
            sample_id: id.clone(),
            image_t1: rgb_to_tensor(a.as_raw(), h as usize, w as usize),
            image_t2: rgb_to_tensor(b.as_raw(), h as usize, w as usize),
            mask,
            captions: refs.iter().map(|r| frame_caption(r, vocab, max_caption_len)).collect(),
            references: refs,
        };
        sample.validate(manifest.num_classes)?;
        out.push(sample);
    }
    Ok(out)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes synthetic splits in the LEVIR-MCI layout. A non-empty `root`
/// is only overwritten with `force`.
pub fn write_levir_mci(root: &Path, splits: &[(&str, &[SynthSample])], force: bool) -> Result<()> {
    if root.exists() {
        let non_empty = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Validation(format!(
                "output directory {} is not empty (use --force to overwrite)",
                root.display()
            )));
        }
        if non_empty {
            for split in ["train", "val", "test"] {
                let dir = root.join(split);
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
            }
        }
    }
    let mut file = CaptionFile::default();
    for (split, samples) in splits {
        for folder in ["A", "B", "label"] {
            create_dir(&root.join(split).join(folder))?;
        }
        for s in samples.iter() {
            let size = s.size as u32;
            let name = format!("{}.png", s.id);
            let save_rgb = |folder: &str, px: &[u8]| -> Result<()> {
                let path = root.join(split).join(folder).join(&name);
                RgbImage::from_raw(size, size, px.to_vec())
                    .expect("buffer matches size")
                    .save(&path)
                    .map_err(|e| Error::Image { path, source: e })
            };
            save_rgb("A", &s.image_t1)?;
            save_rgb("B", &s.image_t2)?;
            let path = root.join(split).join("label").join(&name);
            GrayImage::from_raw(size, size, s.mask.clone())
                .expect("buffer matches size")
                .save(&path)
                .map_err(|e| Error::Image { path, source: e })?;
            file.images.push(CaptionEntry {
                filename: name,
                split: split.to_string(),
                sentences: s.captions.iter().map(|c| Sentence { raw: c.clone() }).collect(),
            });
        }
    }
    let path = root.join("captions.json");
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
