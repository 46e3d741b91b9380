//! CLIP text encoder: tokenizer plus the text tower and its projection.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{Linear, Module, VarBuilder};
use candle_transformers::models::clip::text_model::{Activation, ClipTextConfig, ClipTextTransformer};
use hiseg_core::backend::TextEncoder;
use hiseg_core::{Error, Result};
use ndarray::Array2;
use tokenizers::Tokenizer;

use crate::tensor::{env, to_array2};

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";

pub fn text_config(backbone_id: &str) -> Result<ClipTextConfig> {
    let (embed_dim, heads) = match backbone_id {
        "vit_b_16" => (512, 8),
        "vit_l_14" => (768, 12),
        other => return Err(Error::config(format!("unknown backbone `{other}`"))),
    };
    Ok(ClipTextConfig {
        vocab_size: 49408,
        embed_dim,
        activation: Activation::QuickGelu,
        intermediate_size: 4 * embed_dim,
        max_position_embeddings: 77,
        pad_with: None,
        num_hidden_layers: 12,
        num_attention_heads: heads,
        projection_dim: embed_dim,
    })
}

pub struct ClipText {
    model: ClipTextTransformer,
    projection: Linear,
    tokenizer: Tokenizer,
    start: u32,
    end: u32,
    max_len: usize,
    joint_width: usize,
    device: Device,
}

impl ClipText {
    pub fn load(vb: VarBuilder, config: &ClipTextConfig, tokenizer: Tokenizer) -> Result<Self> {
        let id = |t: &str| {
            tokenizer
                .token_to_id(t)
                .ok_or_else(|| Error::environment(format!("tokenizer has no `{t}` token")))
        };
        let (start, end) = (id(START_TOKEN)?, id(END_TOKEN)?);
        let load = || -> candle_core::Result<(ClipTextTransformer, Linear)> {
            let model = ClipTextTransformer::new(vb.pp("text_model"), config)?;
            let projection =
                candle_nn::linear_no_bias(config.embed_dim, config.projection_dim, vb.pp("text_projection"))?;
            Ok((model, projection))
        };
        let (model, projection) = load().map_err(env("cannot load text encoder"))?;
        Ok(Self {
            model,
            projection,
            tokenizer,
            start,
            end,
            max_len: config.max_position_embeddings,
            joint_width: config.projection_dim,
            device: vb.device().clone(),
        })
    }

    pub fn from_files(model: &Path, tokenizer: &Path, backbone_id: &str, device: &Device) -> Result<Self> {
        let tok = Tokenizer::from_file(tokenizer)
            .map_err(|e| Error::environment(format!("cannot read tokenizer {}: {e}", tokenizer.display())))?;
        // SAFETY: the file is opened read-only and not modified while mapped.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[model], DType::F32, device) }
            .map_err(|e| Error::environment(format!("cannot open {}: {e}", model.display())))?;
        Self::load(vb, &text_config(backbone_id)?, tok)
    }

    /// Start token, prompt tokens (truncated to fit), end token.
    pub fn token_ids(&self, prompt: &str) -> Result<Vec<u32>> {
        let enc = self
            .tokenizer
            .encode(prompt, false)
            .map_err(|e| Error::validation(format!("cannot tokenize `{prompt}`: {e}")))?;
        let body = enc.get_ids();
        let body = &body[..body.len().min(self.max_len - 2)];
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(self.start);
        ids.extend_from_slice(body);
        ids.push(self.end);
        Ok(ids)
    }

    fn embed_one(&self, ids: &[u32]) -> candle_core::Result<Tensor> {
        let n = ids.len();
        let input = Tensor::new(ids, &self.device)?.unsqueeze(0)?;
        let hidden = self.model.forward_with_mask(&input, usize::MAX)?;
        // no padding, so the end token is the last position
        let pooled = hidden.narrow(1, n - 1, 1)?.squeeze(1)?;
        self.projection.forward(&pooled)
    }
}

impl TextEncoder for ClipText {
    fn joint_width(&self) -> usize {
        self.joint_width
    }

    fn embed(&self, prompts: &[String]) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((prompts.len(), self.joint_width));
        for (i, p) in prompts.iter().enumerate() {
            let ids = self.token_ids(p)?;
            let row = self.embed_one(&ids).map_err(env("text encoder"))?;
            out.row_mut(i).assign(&to_array2(&row)?.row(0));
        }
        Ok(out)
    }
}
