//! Image preparation for the vision encoder and the diffusion model.

use image::imageops::{self, FilterType};
use image::RgbImage;
use ndarray::Array3;

use crate::error::{Error, Result};

/// Per-channel normalisation statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl ChannelStats {
    /// Statistics published with the CLIP image encoders.
    pub const CLIP: ChannelStats = ChannelStats {
        mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
        std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
    };
}

/// A normalised `3 x H x W` raster whose sides are patch multiples.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    pub pixels: Array3<f32>,
    pub patch: usize,
}

impl PreparedImage {
    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.height() / self.patch, self.width() / self.patch)
    }
}

fn round_to_multiple(x: f64, m: usize) -> usize {
    (((x / m as f64).round() as usize).max(1)) * m
}

/// Output `(width, height)` for an image: the shorter side is scaled to
/// `target_short` keeping the aspect ratio, then both sides are rounded to
/// the nearest multiple of `patch`.
pub fn plan_resize(width: u32, height: u32, target_short: usize, patch: usize) -> Result<(usize, usize)> {
    if width == 0 || height == 0 {
        return Err(Error::validation(format!("degenerate image of size {width}x{height}")));
    }
    if patch == 0 || target_short == 0 {
        return Err(Error::config("patch size and target side must be positive"));
    }
    let scale = target_short as f64 / width.min(height) as f64;
    let w = round_to_multiple((width as f64 * scale).round(), patch);
    let h = round_to_multiple((height as f64 * scale).round(), patch);
    Ok((w, h))
}

fn to_chw(img: &RgbImage, map: impl Fn(usize, f32) -> f32) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = map(c, px[c] as f32 / 255.0);
        }
    }
    out
}

pub fn prepare_encoder_input(
    img: &RgbImage,
    target_short: usize,
    patch: usize,
    stats: ChannelStats,
) -> Result<PreparedImage> {
    let (w, h) = plan_resize(img.width(), img.height(), target_short, patch)?;
    let resized;
    let src = if (w as u32, h as u32) == img.dimensions() {
        img
    } else {
        resized = imageops::resize(img, w as u32, h as u32, FilterType::CatmullRom);
        &resized
    };
    let pixels = to_chw(src, |c, v| (v - stats.mean[c]) / stats.std[c]);
    Ok(PreparedImage { pixels, patch })
}

/// Square `3 x side x side` raster scaled to `[-1, 1]`, as consumed by a
/// latent-diffusion autoencoder.
pub fn prepare_square(img: &RgbImage, side: usize) -> Result<Array3<f32>> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::validation("degenerate image"));
    }
    if side == 0 {
        return Err(Error::config("diffusion input side must be positive"));
    }
    let resized = imageops::resize(img, side as u32, side as u32, FilterType::Triangle);
    Ok(to_chw(&resized, |_, v| v * 2.0 - 1.0))
}
