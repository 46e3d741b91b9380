//! Synthetic VOC-layout datasets, recorded score maps and a binary runner.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use hiseg_core::dataset::read_index_png;
use hiseg_core::replay::ReplayStore;
use hiseg_core::segment::{ScoreMap, IGNORE};
use ndarray::{Array2, Array3};

pub const W: usize = 12;
pub const H: usize = 9;

pub fn id(i: usize) -> String {
    format!("2007_{i:06}")
}

/// Raw VOC mask: background, a block of one class, a second class on odd
/// indices, and a 255 border.
pub fn raw_mask(i: usize) -> Array2<u16> {
    let class = (i % 20 + 1) as u16;
    Array2::from_shape_fn((H, W), |(y, x)| {
        if y == 0 || x == 0 {
            255
        } else if x >= 4 + i % 3 && y >= 3 {
            class
        } else if i % 2 == 1 && x < 3 && y > 5 {
            (class % 20) + 1
        } else {
            0
        }
    })
}

fn write_raw_png(path: &Path, raw: &Array2<u16>) {
    let file = std::fs::File::create(path).unwrap();
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), W as u32, H as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let data: Vec<u8> = raw.iter().map(|&v| v as u8).collect();
    enc.write_header().unwrap().write_image_data(&data).unwrap();
}

/// `n` images listed in `split.txt`; masks from [`raw_mask`].
pub fn make_voc(root: &Path, n: usize, split: &str) {
    for d in ["JPEGImages", "SegmentationClass", "ImageSets/Segmentation"] {
        std::fs::create_dir_all(root.join(d)).unwrap();
    }
    let ids: Vec<String> = (0..n).map(id).collect();
    std::fs::write(root.join(format!("ImageSets/Segmentation/{split}.txt")), ids.join("\n") + "\n").unwrap();
    for (i, id) in ids.iter().enumerate() {
        let img = image::RgbImage::from_fn(W as u32, H as u32, |x, y| {
            image::Rgb([(x * 20) as u8, (y * 25) as u8, (i * 40) as u8])
        });
        img.save(root.join("JPEGImages").join(format!("{id}.jpg"))).unwrap();
        write_raw_png(&root.join("SegmentationClass").join(format!("{id}.png")), &raw_mask(i));
    }
}

/// 21-column scores at full resolution: 1 for the true foreground class and
/// 0 elsewhere. Ignored pixels score class 1.
pub fn oracle_scores(raw: &Array2<u16>) -> ScoreMap {
    let cols = 21;
    let scores = Array3::from_shape_fn((H, W, cols), |(y, x, c)| {
        let g = raw[[y, x]];
        let g = if g == 255 { 1 } else { g as usize };
        if c == g && c != 0 {
            1.0
        } else {
            0.0
        }
    });
    ScoreMap::new(scores, (0..cols as u16).collect(), Some(0), true).unwrap()
}

/// Replay store holding oracle scores for the first `n` synthetic images.
pub fn oracle_store(root: &Path, n: usize) -> ReplayStore {
    let store = ReplayStore::new(root);
    for i in 0..n {
        store.write_scores(&id(i), &oracle_scores(&raw_mask(i))).unwrap();
    }
    store
}

/// Label values other than ignore present in a raw mask.
pub fn present(raw: &Array2<u16>) -> Vec<u16> {
    let mut v: Vec<u16> = raw.iter().copied().filter(|&l| l != 255 && l != IGNORE).collect();
    v.sort_unstable();
    v.dedup();
    v
}

pub fn hiseg(args: &[&str]) -> Output {
    hiseg_env(args, &[])
}

pub fn hiseg_env(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hiseg"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

/// Runs and asserts success, returning stdout.
pub fn ok(args: &[&str]) -> String {
    let out = hiseg(args);
    assert!(
        out.status.success(),
        "hiseg {args:?} failed ({:?}): {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn read_labels(path: &Path) -> Array2<u16> {
    read_index_png(path).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
