//! Change-map, overlay and attention images.

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 60, 60],
    [250, 210, 40],
    [60, 130, 240],
    [170, 80, 220],
    [40, 200, 200],
    [250, 140, 30],
    [120, 220, 80],
];

pub const TRUE_POSITIVE: [u8; 3] = [0, 200, 0];
pub const TRUE_NEGATIVE: [u8; 3] = [255, 255, 255];
pub const FALSE_POSITIVE: [u8; 3] = [220, 0, 0];
pub const FALSE_NEGATIVE: [u8; 3] = [0, 0, 220];

fn check_len(what: &str, len: usize, width: usize, height: usize) -> Result<()> {
    if len != width * height {
        return Err(Error::Shape(format!("{what} has {len} pixels, expected {width}x{height}")));
    }
    Ok(())
}

/// Class ids as an 8-bit grayscale image.
pub fn mask_image(mask: &[usize], width: usize, height: usize) -> Result<GrayImage> {
    check_len("mask", mask.len(), width, height)?;
    let raw = mask.iter().map(|&c| c.min(255) as u8).collect();
    Ok(GrayImage::from_raw(width as u32, height as u32, raw).expect("buffer matches size"))
}

/// Four-colour comparison against a ground truth on the binary change
/// mask (class > 0 is change).
pub fn error_overlay(pred: &[usize], truth: &[u8], width: usize, height: usize) -> Result<RgbImage> {
    check_len("prediction", pred.len(), width, height)?;
    check_len("ground truth", truth.len(), width, height)?;
    let mut img = RgbImage::new(width as u32, height as u32);
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        let colour = match (p > 0, t > 0) {
            (true, true) => TRUE_POSITIVE,
            (false, false) => TRUE_NEGATIVE,
            (true, false) => FALSE_POSITIVE,
            (false, true) => FALSE_NEGATIVE,
        };
        img.put_pixel((i % width) as u32, (i / width) as u32, Rgb(colour));
    }
    Ok(img)
}

/// Predicted classes blended at half opacity over `base`; background is
/// left untouched.
pub fn class_overlay(pred: &[usize], base: &RgbImage) -> Result<RgbImage> {
    let (w, h) = (base.width() as usize, base.height() as usize);
    check_len("prediction", pred.len(), w, h)?;
    let mut img = base.clone();
    for (i, &p) in pred.iter().enumerate() {
        if p == 0 {
            continue;
        }
        let colour = PALETTE[p % PALETTE.len()];
        let px = img.get_pixel_mut((i % w) as u32, (i / w) as u32);
        for (c, &k) in px.0.iter_mut().zip(&colour) {
            *c = ((u16::from(*c) + u16::from(k)) / 2) as u8;
        }
    }
    Ok(img)
}

/// Attention weights over a `grid_w x grid_h` token grid, scaled to the
/// maximum and upsampled (nearest) to `width x height`.
pub fn attention_heatmap(
    weights: &[f64],
    grid_w: usize,
    grid_h: usize,
    width: usize,
    height: usize,
) -> Result<GrayImage> {
    check_len("attention map", weights.len(), grid_w, grid_h)?;
    let max = weights.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    Ok(GrayImage::from_fn(width as u32, height as u32, |x, y| {
        let gx = x as usize * grid_w / width;
        let gy = y as usize * grid_h / height;
        Luma([(weights[gy * grid_w + gx] * scale).round().clamp(0.0, 255.0) as u8])
    }))
}
