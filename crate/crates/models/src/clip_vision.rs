//! CLIP image encoder with per-block taps.
//!
//! Weights use the Hugging Face `CLIPModel` naming (`vision_model.*`,
//! `visual_projection`). The forward pass is written out here rather than
//! taken from a model zoo because the attention probabilities of every block
//! have to be observable.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{LayerNorm, Linear, VarBuilder};
use hiseg_core::attention::{AttentionStack, EmbeddingMatrix, SquareMap, StackAxis};
use hiseg_core::backend::{EncoderInfo, ImageEncoder};
use hiseg_core::fusion::{
    head_collapse, EncoderTrace, HeadPolicy, JointProjection, LastBlockWeights, LayerNormParams, LayerTrace,
};
use hiseg_core::preprocess::{ChannelStats, PreparedImage};
use hiseg_core::resample::interpolate_positions;
use hiseg_core::{Error, Result};
use ndarray::{Array1, Array2};

use crate::tensor::{env, from_array, linear_to_array, norm_to_array, to_array1, to_array2, to_array3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisionConfig {
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_width: usize,
    pub joint_width: usize,
    /// Patch grid the position table was trained for.
    pub grid: (usize, usize),
    pub eps: f64,
}

impl VisionConfig {
    pub fn vit_b_16() -> Self {
        Self {
            patch: 16,
            width: 768,
            heads: 12,
            depth: 12,
            mlp_width: 3072,
            joint_width: 512,
            grid: (14, 14),
            eps: 1e-5,
        }
    }

    pub fn vit_l_14() -> Self {
        Self {
            patch: 14,
            width: 1024,
            heads: 16,
            depth: 24,
            mlp_width: 4096,
            joint_width: 768,
            grid: (16, 16),
            eps: 1e-5,
        }
    }

    pub fn for_backbone(id: &str) -> Result<Self> {
        match id {
            "vit_b_16" => Ok(Self::vit_b_16()),
            "vit_l_14" => Ok(Self::vit_l_14()),
            other => Err(Error::config(format!(
                "unknown backbone `{other}` (expected vit_b_16 or vit_l_14)"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

fn layer_norm(vb: VarBuilder, width: usize, eps: f64) -> candle_core::Result<(LayerNorm, LayerNormParams)> {
    let w = vb.get(width, "weight")?;
    let b = vb.get(width, "bias")?;
    let params = norm_to_array(&w, &b, eps).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
    Ok((LayerNorm::new(w, b, eps), params))
}

struct Block {
    ln1: LayerNorm,
    ln1_params: LayerNormParams,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn load(vb: VarBuilder, c: &VisionConfig) -> candle_core::Result<Self> {
        let d = c.width;
        let att = vb.pp("self_attn");
        let (ln1, ln1_params) = layer_norm(vb.pp("layer_norm1"), d, c.eps)?;
        let (ln2, _) = layer_norm(vb.pp("layer_norm2"), d, c.eps)?;
        Ok(Self {
            ln1,
            ln1_params,
            q: candle_nn::linear(d, d, att.pp("q_proj"))?,
            k: candle_nn::linear(d, d, att.pp("k_proj"))?,
            v: candle_nn::linear(d, d, att.pp("v_proj"))?,
            out: candle_nn::linear(d, d, att.pp("out_proj"))?,
            ln2,
            fc1: candle_nn::linear(d, c.mlp_width, vb.pp("mlp").pp("fc1"))?,
            fc2: candle_nn::linear(c.mlp_width, d, vb.pp("mlp").pp("fc2"))?,
        })
    }

    /// `x` is `T x D`; returns the block output and `H x T x T` attention.
    fn forward(&self, x: &Tensor, heads: usize) -> candle_core::Result<(Tensor, Tensor)> {
        let (t, d) = x.dims2()?;
        let hd = d / heads;
        let split = |y: Tensor| y.reshape((t, heads, hd))?.transpose(0, 1)?.contiguous();
        let h = self.ln1.forward(x)?;
        let q = split(self.q.forward(&h)?)?;
        let k = split(self.k.forward(&h)?)?;
        let v = split(self.v.forward(&h)?)?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let probs = candle_nn::ops::softmax_last_dim(&scores)?;
        let mixed = probs.matmul(&v)?.transpose(0, 1)?.reshape((t, d))?;
        let x = (x + self.out.forward(&mixed)?)?;
        let m = self.fc1.forward(&self.ln2.forward(&x)?)?;
        let m = (&m * candle_nn::ops::sigmoid(&(&m * 1.702)?)?)?;
        let y = (&x + self.fc2.forward(&m)?)?;
        Ok((y, probs))
    }
}

/// Called after each block with its index, output and attention probabilities.
type BlockTap<'a> = dyn FnMut(usize, &Tensor, &Tensor) -> Result<()> + 'a;

pub struct ClipVision {
    config: VisionConfig,
    info: EncoderInfo,
    device: Device,
    patch_embed: Tensor,
    class_embedding: Tensor,
    positions: Array2<f32>,
    pre_norm: LayerNorm,
    blocks: Vec<Block>,
    post_norm: LayerNorm,
    projection: Linear,
    last: Arc<LastBlockWeights>,
}

impl ClipVision {
    pub fn load(vb: VarBuilder, config: VisionConfig, backbone_id: &str) -> Result<Self> {
        Self::load_inner(vb, config, backbone_id).map_err(|e| {
            Error::environment(format!("cannot load image encoder `{backbone_id}`: {e}"))
        })
    }

    pub fn from_file(path: &Path, config: VisionConfig, backbone_id: &str, device: &Device) -> Result<Self> {
        // SAFETY: the file is opened read-only and not modified while mapped.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[path], DType::F32, device) }.map_err(|e| {
            Error::environment(format!("cannot open {} for `{backbone_id}`: {e}", path.display()))
        })?;
        Self::load(vb, config, backbone_id)
    }

    fn load_inner(vb: VarBuilder, c: VisionConfig, backbone_id: &str) -> candle_core::Result<Self> {
        if c.depth < 2 || c.heads == 0 || !c.width.is_multiple_of(c.heads) {
            candle_core::bail!("inconsistent encoder configuration {c:?}");
        }
        let device = vb.device().clone();
        let vm = vb.pp("vision_model");
        let emb = vm.pp("embeddings");
        let d = c.width;
        let patch_embed = emb.get((d, 3, c.patch, c.patch), "patch_embedding.weight")?;
        let class_embedding = emb.get(d, "class_embedding")?;
        let positions = emb.get((c.grid.0 * c.grid.1 + 1, d), "position_embedding.weight")?;
        let positions = to_array2(&positions).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let (pre_norm, _) = layer_norm(vm.pp("pre_layrnorm"), d, c.eps)?;
        let layers = vm.pp("encoder").pp("layers");
        let blocks = (0..c.depth)
            .map(|i| Block::load(layers.pp(i), &c))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let (post_norm, post_params) = layer_norm(vm.pp("post_layernorm"), d, c.eps)?;
        let projection = candle_nn::linear_no_bias(d, c.joint_width, vb.pp("visual_projection"))?;

        let to_msg = |e: Error| candle_core::Error::Msg(e.to_string());
        let b = blocks.last().expect("depth >= 2");
        let last = LastBlockWeights {
            pre_norm: b.ln1_params.clone(),
            query: linear_to_array(&b.q).map_err(to_msg)?,
            key: linear_to_array(&b.k).map_err(to_msg)?,
            value: linear_to_array(&b.v).map_err(to_msg)?,
            out: linear_to_array(&b.out).map_err(to_msg)?,
            heads: c.heads,
            joint: JointProjection {
                post_norm: Some(post_params),
                projection: linear_to_array(&projection).map_err(to_msg)?,
            },
        };
        last.validate().map_err(to_msg)?;
        let info = EncoderInfo {
            backbone_id: backbone_id.into(),
            patch_size: c.patch,
            depth: c.depth,
            width: d,
            heads: c.heads,
            joint_width: c.joint_width,
            stats: ChannelStats::CLIP,
        };
        Ok(Self {
            config: c,
            info,
            device,
            patch_embed,
            class_embedding,
            positions,
            pre_norm,
            blocks,
            post_norm,
            projection,
            last: Arc::new(last),
        })
    }

    pub fn config(&self) -> &VisionConfig {
        &self.config
    }

    /// Token matrix entering the first block, `(hw + 1) x D`.
    fn embed(&self, input: &PreparedImage) -> Result<Tensor> {
        let p = self.config.patch;
        if input.patch != p {
            return Err(Error::shape(format!("encoder expects {p}px patches, got {}px", input.patch)));
        }
        let (gh, gw) = input.grid();
        if gh == 0 || gw == 0 || gh * p != input.height() || gw * p != input.width() {
            return Err(Error::shape(format!(
                "image {}x{} is not a whole number of {p}px patches",
                input.width(),
                input.height()
            )));
        }
        let pos = interpolate_positions(self.positions.view(), self.config.grid, (gh, gw))?;
        let pos = from_array(&pos, &self.device)?;
        let pixels = from_array(&input.pixels, &self.device)?;
        let run = || -> candle_core::Result<Tensor> {
            let d = self.config.width;
            let patches = pixels
                .unsqueeze(0)?
                .conv2d(&self.patch_embed, 0, p, 1, 1)?
                .reshape((d, gh * gw))?
                .t()?;
            let cls = self.class_embedding.reshape((1, d))?;
            let x = (Tensor::cat(&[&cls, &patches], 0)? + pos)?;
            self.pre_norm.forward(&x)
        };
        run().map_err(env("image encoder embedding"))
    }

    /// Runs blocks `0..upto`; `tap` receives each block's output and attention.
    fn run_blocks(
        &self,
        mut x: Tensor,
        upto: usize,
        mut tap: Option<&mut BlockTap<'_>>,
    ) -> Result<Tensor> {
        for (i, block) in self.blocks[..upto].iter().enumerate() {
            let (y, probs) = block.forward(&x, self.config.heads).map_err(env("image encoder block"))?;
            if let Some(f) = tap.as_mut() {
                f(i, &y, &probs)?;
            }
            x = y;
        }
        Ok(x)
    }

    /// One block applied to a host-side token matrix.
    pub fn block_forward(&self, index: usize, x: &Array2<f32>) -> Result<Array2<f32>> {
        let block = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::validation(format!("block {index} outside 0..{}", self.blocks.len())))?;
        let (y, _) = block
            .forward(&from_array(x, &self.device)?, self.config.heads)
            .map_err(env("image encoder block"))?;
        to_array2(&y)
    }

    /// Standard forward through every block; returns the joint-space class
    /// embedding. With `tapped`, every block's activations are also copied
    /// to the host, as `trace` does.
    pub fn forward_class_embedding(&self, input: &PreparedImage, tapped: bool) -> Result<Array1<f32>> {
        let x = self.embed(input)?;
        let mut sink = |_: usize, y: &Tensor, a: &Tensor| -> Result<()> {
            to_array2(y)?;
            to_array3(a)?;
            Ok(())
        };
        let tap: Option<&mut BlockTap<'_>> =
            if tapped { Some(&mut sink) } else { None };
        let x = self.run_blocks(x, self.blocks.len(), tap)?;
        let run = || -> candle_core::Result<Tensor> {
            let cls = x.narrow(0, 0, 1)?;
            self.projection.forward(&self.post_norm.forward(&cls)?)?.squeeze(0)
        };
        to_array1(&run().map_err(env("image encoder head"))?)
    }
}

impl ImageEncoder for ClipVision {
    fn info(&self) -> &EncoderInfo {
        &self.info
    }

    fn trace(&self, input: &PreparedImage, policy: HeadPolicy) -> Result<EncoderTrace> {
        let x = self.embed(input)?;
        let mut layers = Vec::with_capacity(self.config.depth - 1);
        let mut sink = |i: usize, y: &Tensor, a: &Tensor| -> Result<()> {
            let maps = to_array3(a)?
                .outer_iter()
                .map(|m| SquareMap::stochastic(m.to_owned()))
                .collect::<Result<Vec<_>>>()?;
            let attention = head_collapse(AttentionStack::new(maps, StackAxis::Heads)?, policy)?;
            layers.push(LayerTrace::new(i + 1, EmbeddingMatrix::new(to_array2(y)?)?, attention)?);
            Ok(())
        };
        self.run_blocks(x, self.config.depth - 1, Some(&mut sink))?;
        let trace = EncoderTrace {
            grid: input.grid(),
            depth: self.config.depth,
            layers,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn last_block(&self) -> Arc<LastBlockWeights> {
        self.last.clone()
    }
}

