//! Encoder half of the latent autoencoder, returning the posterior mean.

use candle_core::{Module, Result, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, VarBuilder};
use candle_transformers::models::stable_diffusion::unet_2d_blocks::{
    DownEncoderBlock2D, DownEncoderBlock2DConfig, UNetMidBlock2D, UNetMidBlock2DConfig,
};

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub block_out_channels: Vec<usize>,
    pub layers_per_block: usize,
    pub latent_channels: usize,
    pub norm_num_groups: usize,
    pub use_quant_conv: bool,
    /// Multiplier applied to the latent before it enters the UNet.
    pub scaling_factor: f64,
}

impl VaeConfig {
    pub fn sd21() -> Self {
        Self {
            block_out_channels: vec![128, 256, 512, 512],
            layers_per_block: 2,
            latent_channels: 4,
            norm_num_groups: 32,
            use_quant_conv: true,
            scaling_factor: 0.18215,
        }
    }

    /// Ratio of image side to latent side.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.block_out_channels.len() - 1)
    }
}

pub struct VaeEncoder {
    config: VaeConfig,
    conv_in: Conv2d,
    down: Vec<DownEncoderBlock2D>,
    mid: UNetMidBlock2D,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    quant_conv: Option<Conv2d>,
}

impl VaeEncoder {
    /// `vb` points at the autoencoder root (it holds `encoder.*` and `quant_conv`).
    pub fn new(vb: VarBuilder, config: VaeConfig) -> Result<Self> {
        let ch = &config.block_out_channels;
        let enc = vb.pp("encoder");
        let pad1 = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let conv_in = candle_nn::conv2d(3, ch[0], 3, pad1, enc.pp("conv_in"))?;
        let down = ch
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let cfg = DownEncoderBlock2DConfig {
                    num_layers: config.layers_per_block,
                    resnet_eps: 1e-6,
                    resnet_groups: config.norm_num_groups,
                    output_scale_factor: 1.0,
                    add_downsample: i + 1 < ch.len(),
                    downsample_padding: 0,
                };
                DownEncoderBlock2D::new(enc.pp("down_blocks").pp(i), if i == 0 { ch[0] } else { ch[i - 1] }, out, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        let last = *ch.last().expect("at least one block");
        let mid_cfg = UNetMidBlock2DConfig {
            num_layers: 1,
            resnet_eps: 1e-6,
            resnet_groups: Some(config.norm_num_groups),
            attn_num_head_channels: None,
            output_scale_factor: 1.0,
        };
        let mid = UNetMidBlock2D::new(enc.pp("mid_block"), last, None, mid_cfg)?;
        let norm_out = candle_nn::group_norm(config.norm_num_groups, last, 1e-6, enc.pp("conv_norm_out"))?;
        let moments = 2 * config.latent_channels;
        let conv_out = candle_nn::conv2d(last, moments, 3, pad1, enc.pp("conv_out"))?;
        let quant_conv = if config.use_quant_conv {
            Some(candle_nn::conv2d(moments, moments, 1, Default::default(), vb.pp("quant_conv"))?)
        } else {
            None
        };
        Ok(Self {
            config,
            conv_in,
            down,
            mid,
            norm_out,
            conv_out,
            quant_conv,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    /// Posterior mean for `x` in `[-1, 1]`, unscaled.
    pub fn encode_mean(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for b in &self.down {
            h = b.forward(&h)?;
        }
        h = self.mid.forward(&h, None)?;
        h = self.conv_out.forward(&candle_nn::ops::silu(&self.norm_out.forward(&h)?)?)?;
        if let Some(q) = &self.quant_conv {
            h = q.forward(&h)?;
        }
        h.narrow(1, 0, self.config.latent_channels)
    }
}
