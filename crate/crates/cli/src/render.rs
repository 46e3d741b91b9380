//! Raster output: label overlays and attention heatmaps.

use std::path::Path;

use hiseg_core::dataset::palette;
use hiseg_core::segment::{LabelMap, IGNORE};
use hiseg_core::{Error, Result};
use image::imageops::{resize, FilterType};
use image::{Rgb, RgbImage};
use ndarray::ArrayView2;

/// Blends the palette colour of every labelled pixel into `image`.
/// Ignored pixels keep the image colour.
pub fn overlay(image: &RgbImage, labels: &LabelMap, alpha: f32) -> Result<RgbImage> {
    let (h, w) = labels.dim();
    if (w as u32, h as u32) != image.dimensions() {
        return Err(Error::shape(format!(
            "labels are {w}x{h} but the image is {}x{}",
            image.width(),
            image.height()
        )));
    }
    let pal = palette();
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let px = image.get_pixel(x, y).0;
        let l = labels.get(y as usize, x as usize);
        if l == IGNORE {
            return Rgb(px);
        }
        let c = pal[l as usize % pal.len()];
        Rgb(std::array::from_fn(|i| (px[i] as f32 * (1.0 - alpha) + c[i] as f32 * alpha).round() as u8))
    }))
}

// (position, rgb) stops of a dark-to-bright perceptual ramp
const RAMP: [(f32, [f32; 3]); 5] = [
    (0.0, [0.0, 0.0, 4.0]),
    (0.25, [87.0, 16.0, 110.0]),
    (0.5, [188.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 9.0]),
    (1.0, [252.0, 255.0, 164.0]),
];

fn ramp(t: f32) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let i = RAMP.iter().rposition(|&(p, _)| p <= t).unwrap_or(0).min(RAMP.len() - 2);
    let (p0, c0) = RAMP[i];
    let (p1, c1) = RAMP[i + 1];
    let f = (t - p0) / (p1 - p0);
    Rgb(std::array::from_fn(|k| (c0[k] + (c1[k] - c0[k]) * f).round() as u8))
}

/// Min-max normalised heatmap of `values`, scaled to `size` with nearest
/// neighbour so cells stay visible.
pub fn heatmap(values: ArrayView2<'_, f32>, size: (u32, u32)) -> RgbImage {
    let (h, w) = values.dim();
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let small = RgbImage::from_fn(w as u32, h as u32, |x, y| ramp((values[[y as usize, x as usize]] - lo) / span));
    resize(&small, size.0, size.1, FilterType::Nearest)
}

pub fn save(image: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image.save(path).map_err(|e| Error::data(path, format!("cannot write image: {e}")))
}
