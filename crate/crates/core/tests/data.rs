use std::path::Path;

use changeminds::config::DataConfig;
use changeminds::data::{
    build_vocabulary, collate_eval, generate_synthetic, load_split, write_levir_mci, SynthSample, SynthSpec, END, START,
};
use changeminds::Error;

fn scenes(n: usize, size: usize, captions: usize, seed: u64) -> Vec<SynthSample> {
    generate_synthetic(&SynthSpec {
        num_samples: n,
        image_size: size,
        captions_per_sample: captions,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn data_config(root: &Path, size: usize) -> DataConfig {
    DataConfig { root: root.display().to_string(), image_size: size, max_caption_len: 24, ..DataConfig::default() }
}

fn write(root: &Path, train: &[SynthSample]) {
    write_levir_mci(root, &[("train", train)], false).unwrap();
}

#[test]
fn loads_well_formed_samples_with_encoded_captions() {
    let dir = tempfile::tempdir().unwrap();
    let train = scenes(2, 256, 1, 3);
    write(dir.path(), &train);
    let vocab = build_vocabulary(dir.path(), "train").unwrap();
    let samples = load_split(&data_config(dir.path(), 256), "train", &vocab).unwrap();
    assert_eq!(samples.len(), 2);
    for s in &samples {
        assert_eq!(s.image_t1.shape(), [3, 256, 256]);
        assert_eq!(s.image_t2.shape(), [3, 256, 256]);
        assert_eq!(s.mask.len(), 256 * 256);
        let ids = &s.captions[0];
        assert_eq!(ids[0], START);
        assert_eq!(*ids.last().unwrap(), END);
        assert_eq!(vocab.decode(ids), s.references[0]);
    }
    let original: Vec<_> = train.iter().map(|t| t.mask.clone()).collect();
    let loaded: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    assert_eq!(original, loaded);
}

#[test]
fn unknown_mask_value_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let train = scenes(1, 64, 1, 4);
    write(dir.path(), &train);
    let label = dir.path().join("train/label").join(format!("{}.png", train[0].id));
    image::GrayImage::from_pixel(64, 64, image::Luma([7])).save(&label).unwrap();
    let vocab = build_vocabulary(dir.path(), "train").unwrap();
    let err = load_split(&data_config(dir.path(), 64), "train", &vocab).unwrap_err();
    assert!(matches!(err, Error::Validation(ref m) if m.contains('7')), "{err}");
}

#[test]
fn missing_image_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let train = scenes(2, 64, 1, 5);
    write(dir.path(), &train);
    std::fs::remove_file(dir.path().join("train/B").join(format!("{}.png", train[1].id))).unwrap();
    let vocab = build_vocabulary(dir.path(), "train").unwrap();
    match load_split(&data_config(dir.path(), 64), "train", &vocab).unwrap_err() {
        Error::Load { sample, .. } => assert_eq!(sample, train[1].id),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn missing_split_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &scenes(1, 64, 1, 6));
    let vocab = build_vocabulary(dir.path(), "train").unwrap();
    let err = load_split(&data_config(dir.path(), 64), "test", &vocab).unwrap_err();
    assert!(matches!(err, Error::Load { .. }), "{err}");
}

#[test]
fn evaluation_collate_keeps_every_reference() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), &scenes(3, 64, 5, 7));
    let vocab = build_vocabulary(dir.path(), "train").unwrap();
    let samples = load_split(&data_config(dir.path(), 64), "train", &vocab).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let batch = collate_eval::<f32>(&refs, 24).unwrap();
    assert_eq!(batch.images_t1.shape(), [3, 3, 64, 64]);
    assert_eq!(batch.masks.len(), 3 * 64 * 64);
    for (got, s) in batch.references.iter().zip(&samples) {
        assert_eq!(got.len(), 5);
        assert_eq!(got, &s.references);
    }
}

#[test]
fn existing_directory_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let train = scenes(1, 64, 1, 8);
    write(dir.path(), &train);
    assert!(write_levir_mci(dir.path(), &[("train", &train)], false).is_err());
    write_levir_mci(dir.path(), &[("train", &train)], true).unwrap();
}

#[test]
fn synthetic_generation_rejects_bad_specs() {
    for spec in [
        SynthSpec { image_size: 0, ..SynthSpec::default() },
        SynthSpec { captions_per_sample: 0, ..SynthSpec::default() },
    ] {
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))), "{spec:?}");
    }
}
