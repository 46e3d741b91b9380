//! Plain-loop f64 forward pass of the synthetic encoder, written from the
//! block definitions, and a checker comparing `fuse` against it.

#![allow(dead_code, clippy::needless_range_loop)]

use hiseg_core::attention::Normalizer;
use hiseg_core::backend::ImageEncoder;
use hiseg_core::fusion::{fuse, AttentionSource, FusionConfig, HeadPolicy, LayerNormParams, LayerSelection, Linear};
use hiseg_core::preprocess::{prepare_encoder_input, PreparedImage};
use hiseg_core::toy::{ToyConfig, ToyVit};
use image::{Rgb, RgbImage};

pub type Mat = Vec<Vec<f64>>;

pub fn ln(x: &Mat, p: &LayerNormParams) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + p.eps as f64).sqrt() * p.weight[j] as f64 + p.bias[j] as f64)
                .collect()
        })
        .collect()
}

pub fn lin(x: &Mat, l: &Linear, with_bias: bool) -> Mat {
    let (out, inp) = l.weight.dim();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|o| {
                    let mut s = 0.0;
                    for i in 0..inp {
                        s += row[i] * l.weight[[o, i]] as f64;
                    }
                    match (&l.bias, with_bias) {
                        (Some(b), true) => s + b[o] as f64,
                        _ => s,
                    }
                })
                .collect()
        })
        .collect()
}

pub fn cols(x: &Mat, from: usize, to: usize) -> Mat {
    x.iter().map(|r| r[from..to].to_vec()).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

pub fn softmax_qk(q: &Mat, k: &Mat) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn quick_gelu(x: f64) -> f64 {
    x / (1.0 + (-1.702 * x).exp())
}

pub fn embed(vit: &ToyVit, img: &PreparedImage) -> Mat {
    let p = vit.config.patch;
    let (gh, gw) = img.grid();
    assert_eq!((gh, gw), vit.config.grid, "reference uses the native position table");
    let mut x = vec![vit.class_embedding.iter().map(|&v| v as f64).collect::<Vec<_>>()];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut flat = Vec::new();
            for c in 0..3 {
                for y in 0..p {
                    for xx in 0..p {
                        flat.push(img.pixels[[c, gy * p + y, gx * p + xx]] as f64);
                    }
                }
            }
            let e = lin(&vec![flat], &Linear::new(vit.patch_embed.clone(), None).unwrap(), false);
            x.push(e[0].clone());
        }
    }
    for (t, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += vit.position_embedding[[t, j]] as f64;
        }
    }
    ln(&x, &vit.pre_norm)
}

/// Standard block; returns the output and the head-averaged attention.
pub fn block(vit: &ToyVit, i: usize, x: &Mat) -> (Mat, Mat) {
    let b = &vit.blocks[i];
    let (d, h) = (vit.config.width, vit.config.heads);
    let hd = d / h;
    let n = ln(x, &b.ln1);
    let (q, k, v) = (lin(&n, &b.query, true), lin(&n, &b.key, true), lin(&n, &b.value, true));
    let t = x.len();
    let mut mixed = vec![vec![0.0; d]; t];
    let mut avg = vec![vec![0.0; t]; t];
    for head in 0..h {
        let a = softmax_qk(&cols(&q, head * hd, (head + 1) * hd), &cols(&k, head * hd, (head + 1) * hd));
        let o = matmul(&a, &cols(&v, head * hd, (head + 1) * hd));
        for r in 0..t {
            mixed[r][head * hd..(head + 1) * hd].copy_from_slice(&o[r]);
            for c in 0..t {
                avg[r][c] += a[r][c] / h as f64;
            }
        }
    }
    let x1 = add(x, &lin(&mixed, &b.out, true));
    let m: Mat = lin(&ln(&x1, &b.ln2), &b.fc1, true)
        .into_iter()
        .map(|r| r.into_iter().map(quick_gelu).collect())
        .collect();
    (add(&x1, &lin(&m, &b.fc2, true)), avg)
}

pub enum RefAttention {
    Shared(Mat),
    PerHead(Vec<Mat>),
}

/// Modified last block (no residual, no MLP) plus joint projection.
pub fn reference_last(vit: &ToyVit, x: &Mat, att: &RefAttention) -> Mat {
    let b = vit.blocks.last().unwrap();
    let d = vit.config.width;
    let hd = d / vit.config.heads;
    let v = lin(&ln(x, &b.ln1), &b.value, true);
    let mixed = match att {
        RefAttention::Shared(a) => matmul(a, &v),
        RefAttention::PerHead(maps) => {
            let mut out = vec![vec![0.0; d]; x.len()];
            for (h, a) in maps.iter().enumerate() {
                let o = matmul(a, &cols(&v, h * hd, (h + 1) * hd));
                for r in 0..x.len() {
                    out[r][h * hd..(h + 1) * hd].copy_from_slice(&o[r]);
                }
            }
            out
        }
    };
    let y = lin(&mixed, &b.out, true);
    lin(&ln(&y, &vit.post_norm), &vit.projection, false)
}

pub fn reference_fuse(vit: &ToyVit, img: &PreparedImage, source: AttentionSource, normalizer: Normalizer, layers: &[usize]) -> Vec<Mat> {
    let depth = vit.config.depth;
    let mut x = embed(vit, img);
    let mut feats = Vec::new();
    let mut maps = Vec::new();
    for i in 0..depth - 1 {
        let (y, a) = block(vit, i, &x);
        feats.push(y.clone());
        maps.push(a);
        x = y;
    }
    let t = x.len();
    let att = match source {
        AttentionSource::EarlyLayerAvg => {
            let div = match normalizer {
                Normalizer::Count => maps.len() as f64,
                Normalizer::Depth => depth as f64,
            };
            let mut avg = vec![vec![0.0; t]; t];
            for m in &maps {
                for r in 0..t {
                    for c in 0..t {
                        avg[r][c] += m[r][c] / div;
                    }
                }
            }
            RefAttention::Shared(avg)
        }
        AttentionSource::Identity => {
            RefAttention::Shared((0..t).map(|r| (0..t).map(|c| if r == c { 1.0 } else { 0.0 }).collect()).collect())
        }
        AttentionSource::QueryQuery | AttentionSource::KeyKey | AttentionSource::ValueValue => {
            let b = vit.blocks.last().unwrap();
            let n = ln(feats.last().unwrap(), &b.ln1);
            let proj = match source {
                AttentionSource::QueryQuery => &b.query,
                AttentionSource::KeyKey => &b.key,
                _ => &b.value,
            };
            let p = lin(&n, proj, true);
            let hd = vit.config.width / vit.config.heads;
            RefAttention::PerHead(
                (0..vit.config.heads)
                    .map(|h| {
                        let ph = cols(&p, h * hd, (h + 1) * hd);
                        softmax_qk(&ph, &ph)
                    })
                    .collect(),
            )
        }
        AttentionSource::Original => unreachable!("not exercised"),
    };
    layers
        .iter()
        .map(|&i| reference_last(vit, &feats[i - 1], &att)[1..].to_vec())
        .collect()
}

pub fn image_for(cfg: &ToyConfig, seed: u32) -> RgbImage {
    let (gh, gw) = cfg.grid;
    RgbImage::from_fn((gw * cfg.patch) as u32, (gh * cfg.patch) as u32, |x, y| {
        Rgb([
            ((x * 37 + y * 11 + seed * 5) % 256) as u8,
            ((x * 3 + y * 53 + seed) % 256) as u8,
            ((x * y + seed * 17) % 256) as u8,
        ])
    })
}

/// Largest absolute difference between `fuse` and the reference.
pub fn max_error(cfg: &ToyConfig, seed: u64, source: AttentionSource, normalizer: Normalizer, layer_set: &LayerSelection) -> f64 {
    let vit = ToyVit::random(*cfg, seed).unwrap();
    let img = image_for(cfg, seed as u32);
    let short = cfg.grid.0.min(cfg.grid.1) * cfg.patch;
    let prep = prepare_encoder_input(&img, short, cfg.patch, vit.info().stats).unwrap();
    assert_eq!(prep.grid(), cfg.grid);
    let trace = vit.trace(&prep, HeadPolicy::Mean).unwrap();
    let fc = FusionConfig {
        layer_set: layer_set.clone(),
        attention_source: source,
        normalizer,
    };
    let fused = fuse(&trace, &vit.last_block(), &fc).unwrap();
    let layers = layer_set.resolve(cfg.depth).unwrap();
    let expect = reference_fuse(&vit, &prep, source, normalizer, &layers);
    assert_eq!(fused.embeddings.len(), expect.len());
    let mut worst = 0.0f64;
    for (got, want) in fused.embeddings.iter().zip(&expect) {
        assert_eq!(got.nrows(), cfg.grid.0 * cfg.grid.1);
        for (r, row) in want.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                worst = worst.max((got[[r, c]] as f64 - w).abs());
            }
        }
    }
    worst
}

pub fn check(cfg: ToyConfig, seed: u64, source: AttentionSource, normalizer: Normalizer, layer_set: LayerSelection) {
    let err = max_error(&cfg, seed, source, normalizer, &layer_set);
    assert!(err <= 1e-5, "{source:?} {normalizer:?} seed {seed}: max error {err}");
}
