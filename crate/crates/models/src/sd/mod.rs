//! Self-attention extraction from a latent diffusion model.
//!
//! The image is encoded to the autoencoder's posterior mean, scaled, noised
//! to the configured timestep with seeded noise, and passed once through the
//! UNet with the empty-prompt text context. Self-attention maps at the
//! latent resolution are combined per the extraction config.

pub mod unet;
pub mod vae;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config as SdTextConfig};
use candle_transformers::models::stable_diffusion::unet_2d::{BlockConfig, UNet2DConditionModelConfig};
use hiseg_core::backend::AttentionExtractor;
use hiseg_core::diffusion::{gaussian_noise, ExtractionConfig, HeadAccumulator, NoiseSchedule, ResolutionPolicy, SdAttention};
use hiseg_core::preprocess::prepare_square;
use hiseg_core::{Error, Result};
use image::RgbImage;
use ndarray::{Array2, Array4};

use crate::tensor::{env, from_array, to_array3};
use crate::weights::ResolvedWeights;
pub use unet::{Gelu, TapUnet};
pub use vae::{VaeConfig, VaeEncoder};

/// Text-tower token ids of the empty prompt: start, end, then `!` padding.
pub fn empty_prompt_ids(len: usize) -> Vec<u32> {
    let mut ids = vec![0u32; len];
    ids[0] = 49406;
    ids[1] = 49407;
    ids
}

/// UNet layout of Stable Diffusion 2.1-base.
pub fn sd21_unet() -> UNet2DConditionModelConfig {
    let bc = |out_channels, use_cross_attn, attention_head_dim| BlockConfig {
        out_channels,
        use_cross_attn,
        attention_head_dim,
    };
    UNet2DConditionModelConfig {
        center_input_sample: false,
        flip_sin_to_cos: true,
        freq_shift: 0.0,
        blocks: vec![bc(320, Some(1), 5), bc(640, Some(1), 10), bc(1280, Some(1), 20), bc(1280, None, 20)],
        layers_per_block: 2,
        downsample_padding: 1,
        mid_block_scale_factor: 1.0,
        norm_num_groups: 32,
        norm_eps: 1e-5,
        cross_attention_dim: 1024,
        sliced_attention_size: None,
        use_linear_projection: true,
    }
}

pub struct SdExtractor {
    unet: TapUnet,
    vae: VaeEncoder,
    /// `1 x tokens x width` text context of the empty prompt.
    context: Tensor,
    schedule: NoiseSchedule,
    device: Device,
}

fn mmap(path: &std::path::Path, device: &Device) -> Result<VarBuilder<'static>> {
    // SAFETY: weight files are opened read-only and not modified while mapped.
    unsafe { VarBuilder::from_mmaped_safetensors(&[path], DType::F32, device) }
        .map_err(|e| Error::environment(format!("cannot open {}: {e}", path.display())))
}

impl SdExtractor {
    pub fn new(unet: TapUnet, vae: VaeEncoder, context: Tensor, schedule: NoiseSchedule) -> Result<Self> {
        let (b, _, width) = context.dims3().map_err(env("text context"))?;
        if b != 1 || width != unet.config().cross_attention_dim {
            return Err(Error::shape(format!(
                "text context of width {width} for a UNet expecting {}",
                unet.config().cross_attention_dim
            )));
        }
        Ok(Self {
            device: context.device().clone(),
            unet,
            vae,
            context,
            schedule,
        })
    }

    /// Loads the `sd` weights (unet, vae and text encoder files).
    pub fn load(weights: &ResolvedWeights, device: &Device) -> Result<Self> {
        let ctx_vb = mmap(weights.path("text_encoder.safetensors")?, device)?;
        let context = (|| -> candle_core::Result<Tensor> {
            let cfg = SdTextConfig::v2_1();
            let text = ClipTextTransformer::new(ctx_vb, &cfg)?;
            let ids = Tensor::new(empty_prompt_ids(cfg.max_position_embeddings).as_slice(), device)?.unsqueeze(0)?;
            text.forward(&ids)
        })()
        .map_err(env("cannot run diffusion text encoder"))?;
        let unet = TapUnet::new(mmap(weights.path("unet.safetensors")?, device)?, 4, 4, sd21_unet(), Gelu::Erf)
            .map_err(env("cannot load diffusion UNet"))?;
        let vae = VaeEncoder::new(mmap(weights.path("vae.safetensors")?, device)?, VaeConfig::sd21())
            .map_err(env("cannot load autoencoder"))?;
        Self::new(unet, vae, context, NoiseSchedule::stable_diffusion())
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Scaled, noised latent for `image` at the configured timestep.
    pub fn noisy_latent(&self, image: &RgbImage, cfg: &ExtractionConfig, seed: u64) -> Result<Array4<f32>> {
        cfg.validate()?;
        let factor = self.vae.config().downsample_factor();
        if !cfg.input_side.is_multiple_of(factor) {
            return Err(Error::config(format!(
                "input side {} is not a multiple of the autoencoder factor {factor}",
                cfg.input_side
            )));
        }
        let t = self.schedule.timestep_at(cfg)?;
        let pixels = from_array(&prepare_square(image, cfg.input_side)?, &self.device)?;
        let latent = (|| -> candle_core::Result<Tensor> {
            let mean = self.vae.encode_mean(&pixels.unsqueeze(0)?)?;
            mean * self.vae.config().scaling_factor
        })()
        .map_err(env("autoencoder"))?;
        let clean = to_array3(&latent.squeeze(0).map_err(env("autoencoder"))?)?.insert_axis(ndarray::Axis(0));
        let noise = gaussian_noise(clean.shape(), seed)
            .into_dimensionality()
            .map_err(|e| Error::shape(e.to_string()))?;
        self.schedule.add_noise(&clean, &noise, t)
    }
}

impl SdExtractor {
    /// Like `extract`, also naming the blocks that contributed, in visiting order.
    pub fn extract_with_blocks(&self, image: &RgbImage, cfg: &ExtractionConfig, seed: u64) -> Result<(SdAttention, Vec<String>)> {
        match cfg.resolution_policy {
            ResolutionPolicy::HighestOnly => {}
        }
        let latent = self.noisy_latent(image, cfg, seed)?;
        let t = self.schedule.timestep_at(cfg)? as f64;
        let x = from_array(&latent, &self.device)?;
        let mut acc = HeadAccumulator::new(cfg.layer_combine);
        let mut names = Vec::new();
        let mut failure: Option<Error> = None;
        let mut sink = |name: &str, probs: &Tensor| -> candle_core::Result<()> {
            let heads: Vec<Array2<f32>> = match to_array3(probs) {
                Ok(a) => a.outer_iter().map(|m| m.to_owned()).collect(),
                Err(e) => {
                    failure = Some(e);
                    candle_core::bail!("attention readback failed");
                }
            };
            if let Err(e) = acc.push(heads) {
                failure = Some(e);
                candle_core::bail!("attention combine failed");
            }
            names.push(name.to_string());
            Ok(())
        };
        let run = self.unet.forward(&x, t, &self.context, Some(&mut sink));
        if let Some(e) = failure {
            return Err(e);
        }
        run.map_err(env("diffusion UNet"))?;
        log::debug!("diffusion attention from {names:?}");
        Ok((acc.finish()?, names))
    }
}

impl AttentionExtractor for SdExtractor {
    fn extract(&self, image: &RgbImage, cfg: &ExtractionConfig, seed: u64) -> Result<SdAttention> {
        self.extract_with_blocks(image, cfg, seed).map(|(a, _)| a)
    }
}
