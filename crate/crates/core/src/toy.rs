//! A small randomly initialised vision transformer in plain `ndarray`.
//!
//! It has the same block structure as the CLIP image encoder (pre-norm
//! blocks, quick-GELU MLP, final norm and joint projection) and exists so the
//! fusion and evaluation paths can be exercised end to end without
//! pretrained weights.

use std::sync::Arc;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{softmax_attention, AttentionStack, EmbeddingMatrix, StackAxis};
use crate::backend::{EncoderInfo, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{
    head_collapse, EncoderTrace, HeadPolicy, JointProjection, LastBlockWeights, LayerNormParams, LayerTrace,
    Linear,
};
use crate::preprocess::{ChannelStats, PreparedImage};
use crate::resample::interpolate_positions;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub joint_width: usize,
    pub mlp_width: usize,
    /// Patch grid as (rows, cols); position embeddings are sized for it.
    pub grid: (usize, usize),
}

impl ToyConfig {
    /// Two blocks over a 2x2 patch grid.
    pub fn tiny() -> Self {
        Self {
            patch: 4,
            width: 8,
            heads: 2,
            depth: 2,
            joint_width: 6,
            mlp_width: 16,
            grid: (2, 2),
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    pub ln1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct ToyVit {
    pub config: ToyConfig,
    info: EncoderInfo,
    /// `width x (3 * patch * patch)`, input flattened in (channel, row, col) order.
    pub patch_embed: Array2<f32>,
    pub class_embedding: Array1<f32>,
    pub position_embedding: Array2<f32>,
    pub pre_norm: LayerNormParams,
    pub blocks: Vec<ToyBlock>,
    pub post_norm: LayerNormParams,
    pub projection: Linear,
    last: Arc<LastBlockWeights>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Array2<f32> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

fn vector(rng: &mut ChaCha8Rng, n: usize, center: f32, scale: f32) -> Array1<f32> {
    Array1::from_shape_fn(n, |_| center + rng.random_range(-scale..scale))
}

fn linear(rng: &mut ChaCha8Rng, out: usize, inp: usize, bias: bool) -> Linear {
    let w = uniform(rng, out, inp, 1.0 / (inp as f32).sqrt());
    let b = bias.then(|| vector(rng, out, 0.0, 0.1));
    Linear::new(w, b).expect("consistent shapes")
}

fn norm(rng: &mut ChaCha8Rng, n: usize) -> LayerNormParams {
    LayerNormParams {
        weight: vector(rng, n, 1.0, 0.2),
        bias: vector(rng, n, 0.0, 0.1),
        eps: 1e-5,
    }
}

pub fn quick_gelu(x: f32) -> f32 {
    x / (1.0 + (-1.702 * x).exp())
}

impl ToyVit {
    pub fn random(config: ToyConfig, seed: u64) -> Result<Self> {
        if config.depth < 2 || config.heads == 0 || !config.width.is_multiple_of(config.heads) {
            return Err(Error::config("toy encoder needs depth >= 2 and width divisible by heads"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let patch_in = 3 * config.patch * config.patch;
        let patch_embed = uniform(&mut rng, d, patch_in, 1.0 / (patch_in as f32).sqrt());
        let class_embedding = vector(&mut rng, d, 0.0, 0.5);
        let position_embedding = uniform(&mut rng, config.tokens(), d, 0.5);
        let pre_norm = norm(&mut rng, d);
        let blocks = (0..config.depth)
            .map(|_| ToyBlock {
                ln1: norm(&mut rng, d),
                query: linear(&mut rng, d, d, true),
                key: linear(&mut rng, d, d, true),
                value: linear(&mut rng, d, d, true),
                out: linear(&mut rng, d, d, true),
                ln2: norm(&mut rng, d),
                fc1: linear(&mut rng, config.mlp_width, d, true),
                fc2: linear(&mut rng, d, config.mlp_width, true),
            })
            .collect::<Vec<_>>();
        let post_norm = norm(&mut rng, d);
        let projection = linear(&mut rng, config.joint_width, d, false);
        let b = blocks.last().expect("depth >= 2");
        let last = Arc::new(LastBlockWeights {
            pre_norm: b.ln1.clone(),
            query: b.query.clone(),
            key: b.key.clone(),
            value: b.value.clone(),
            out: b.out.clone(),
            heads: config.heads,
            joint: JointProjection {
                post_norm: Some(post_norm.clone()),
                projection: projection.clone(),
            },
        });
        let info = EncoderInfo {
            backbone_id: "toy".into(),
            patch_size: config.patch,
            depth: config.depth,
            width: d,
            heads: config.heads,
            joint_width: config.joint_width,
            stats: ChannelStats::CLIP,
        };
        Ok(Self {
            config,
            info,
            patch_embed,
            class_embedding,
            position_embedding,
            pre_norm,
            blocks,
            post_norm,
            projection,
            last,
        })
    }

    /// Token matrix entering the first block.
    pub fn embed(&self, input: &PreparedImage) -> Result<Array2<f32>> {
        let p = self.config.patch;
        if input.patch != p {
            return Err(Error::shape(format!(
                "toy encoder expects {p}px patches, got {}px",
                input.patch
            )));
        }
        let (gh, gw) = input.grid();
        let mut patches = Array2::zeros((gh * gw, 3 * p * p));
        for gy in 0..gh {
            for gx in 0..gw {
                let block = input.pixels.slice(s![.., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                let flat: Vec<f32> = block.iter().copied().collect();
                patches.row_mut(gy * gw + gx).assign(&Array1::from(flat));
            }
        }
        let mut x = Array2::zeros((gh * gw + 1, self.config.width));
        x.row_mut(0).assign(&self.class_embedding);
        x.slice_mut(s![1.., ..]).assign(&patches.dot(&self.patch_embed.t()));
        x += &interpolate_positions(self.position_embedding.view(), self.config.grid, (gh, gw))?;
        self.pre_norm.apply(x.view())
    }

    /// One block: returns its output and its per-head attention maps.
    pub fn block_forward(&self, index: usize, x: &Array2<f32>) -> Result<(Array2<f32>, AttentionStack)> {
        let b = &self.blocks[index];
        let hd = self.config.width / self.config.heads;
        let h = b.ln1.apply(x.view())?;
        let q = b.query.apply(h.view())?;
        let k = b.key.apply(h.view())?;
        let v = b.value.apply(h.view())?;
        let mut mixed = Array2::zeros(v.raw_dim());
        let mut maps = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let cols = s![.., head * hd..(head + 1) * hd];
            let a = softmax_attention(
                &EmbeddingMatrix::new(q.slice(cols).to_owned())?,
                &EmbeddingMatrix::new(k.slice(cols).to_owned())?,
                hd,
            )?;
            mixed.slice_mut(cols).assign(&a.data().dot(&v.slice(cols)));
            maps.push(a);
        }
        let x1 = x + &b.out.apply(mixed.view())?;
        let mut m = b.fc1.apply(b.ln2.apply(x1.view())?.view())?;
        m.mapv_inplace(quick_gelu);
        let y = &x1 + &b.fc2.apply(m.view())?;
        Ok((y, AttentionStack::new(maps, StackAxis::Heads)?))
    }

    /// Standard forward through every block; returns the joint-space class
    /// token embedding.
    pub fn forward_class_embedding(&self, input: &PreparedImage) -> Result<Array1<f32>> {
        let mut x = self.embed(input)?;
        for i in 0..self.blocks.len() {
            x = self.block_forward(i, &x)?.0;
        }
        let cls = x.slice(s![0..1, ..]).to_owned();
        let post = self.post_norm.apply(cls.view())?;
        Ok(self.projection.apply(post.view())?.row(0).to_owned())
    }

}

impl ImageEncoder for ToyVit {
    fn info(&self) -> &EncoderInfo {
        &self.info
    }

    fn trace(&self, input: &PreparedImage, policy: HeadPolicy) -> Result<EncoderTrace> {
        let mut x = self.embed(input)?;
        let mut layers = Vec::with_capacity(self.config.depth - 1);
        for i in 0..self.config.depth - 1 {
            let (y, heads) = self.block_forward(i, &x)?;
            layers.push(LayerTrace::new(
                i + 1,
                EmbeddingMatrix::new(y.clone())?,
                head_collapse(heads, policy)?,
            )?);
            x = y;
        }
        Ok(EncoderTrace {
            grid: input.grid(),
            depth: self.config.depth,
            layers,
        })
    }

    fn last_block(&self) -> Arc<LastBlockWeights> {
        self.last.clone()
    }
}

/// Bag-of-bytes text encoder: prompts sharing characters get similar
/// vectors. Pairs with [`ToyVit`] for runs without pretrained weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashText {
    pub width: usize,
}

impl TextEncoder for HashText {
    fn joint_width(&self) -> usize {
        self.width
    }

    fn embed(&self, prompts: &[String]) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((prompts.len(), self.width));
        for (i, p) in prompts.iter().enumerate() {
            for (j, b) in p.bytes().enumerate() {
                out[[i, (b as usize * 7 + j) % self.width]] += 1.0 + (j % 3) as f32;
            }
        }
        Ok(out)
    }
}
