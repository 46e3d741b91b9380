//! Conditional denoising UNet whose self-attention probabilities can be
//! observed.
//!
//! Layout and weight names follow the diffusers `UNet2DConditionModel`.
//! Residual blocks and timestep embeddings are reused from
//! candle-transformers; the transformer blocks are written out here so the
//! `attn1` softmax can be handed to a sink.

use candle_core::{Module, Result, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, LayerNorm, Linear, VarBuilder};
use candle_transformers::models::stable_diffusion::embeddings::{TimestepEmbedding, Timesteps};
use candle_transformers::models::stable_diffusion::resnet::{ResnetBlock2D, ResnetBlock2DConfig};
use candle_transformers::models::stable_diffusion::unet_2d::UNet2DConditionModelConfig;

/// Which GELU the feed-forward gate uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gelu {
    /// Exact, as in the reference implementation.
    Erf,
    /// Tanh approximation.
    Tanh,
}

/// Receives `(block name, H x L x L attention)` for every self-attention
/// layer whose token count equals the target.
pub type Sink<'a> = &'a mut dyn FnMut(&str, &Tensor) -> Result<()>;

pub(crate) struct Tap<'a, 'b> {
    pub tokens: usize,
    pub sink: &'a mut Sink<'b>,
}

struct Attention {
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    heads: usize,
}

impl Attention {
    fn new(vb: VarBuilder, dim: usize, context_dim: Option<usize>, heads: usize, head_dim: usize) -> Result<Self> {
        let inner = heads * head_dim;
        let ctx = context_dim.unwrap_or(dim);
        Ok(Self {
            to_q: candle_nn::linear_no_bias(dim, inner, vb.pp("to_q"))?,
            to_k: candle_nn::linear_no_bias(ctx, inner, vb.pp("to_k"))?,
            to_v: candle_nn::linear_no_bias(ctx, inner, vb.pp("to_v"))?,
            to_out: candle_nn::linear(inner, dim, vb.pp("to_out.0"))?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c) = x.squeeze(0)?.dims2()?;
        x.reshape((n, self.heads, c / self.heads))?.transpose(0, 1)?.contiguous()
    }

    /// `x` is `1 x L x C`. Self-attention when `context` is `None`.
    fn forward(&self, x: &Tensor, context: Option<&Tensor>, name: &str, tap: Option<&mut Tap>) -> Result<Tensor> {
        let (_, l, _) = x.dims3()?;
        let ctx = context.unwrap_or(x);
        let q = self.split(&self.to_q.forward(x)?)?;
        let k = self.split(&self.to_k.forward(ctx)?)?;
        let v = self.split(&self.to_v.forward(ctx)?)?;
        let hd = q.dim(D::Minus1)?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let probs = candle_nn::ops::softmax_last_dim(&scores)?;
        if let Some(tap) = tap {
            if context.is_none() && l == tap.tokens {
                (tap.sink)(name, &probs)?;
            }
        }
        let out = probs.matmul(&v)?.transpose(0, 1)?.reshape((1, l, self.heads * hd))?;
        self.to_out.forward(&out)
    }
}

struct TransformerBlock {
    norm1: LayerNorm,
    attn1: Attention,
    norm2: LayerNorm,
    attn2: Attention,
    norm3: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
    gelu: Gelu,
}

impl TransformerBlock {
    fn new(vb: VarBuilder, dim: usize, heads: usize, head_dim: usize, context_dim: usize, gelu: Gelu) -> Result<Self> {
        let inner = 4 * dim;
        Ok(Self {
            norm1: candle_nn::layer_norm(dim, 1e-5, vb.pp("norm1"))?,
            attn1: Attention::new(vb.pp("attn1"), dim, None, heads, head_dim)?,
            norm2: candle_nn::layer_norm(dim, 1e-5, vb.pp("norm2"))?,
            attn2: Attention::new(vb.pp("attn2"), dim, Some(context_dim), heads, head_dim)?,
            norm3: candle_nn::layer_norm(dim, 1e-5, vb.pp("norm3"))?,
            ff_in: candle_nn::linear(dim, 2 * inner, vb.pp("ff.net.0.proj"))?,
            ff_out: candle_nn::linear(inner, dim, vb.pp("ff.net.2"))?,
            gelu,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, name: &str, tap: Option<&mut Tap>) -> Result<Tensor> {
        let x = (self.attn1.forward(&self.norm1.forward(x)?, None, name, tap)? + x)?;
        let x = (self.attn2.forward(&self.norm2.forward(&x)?, Some(context), name, None)? + x)?;
        let gate = self.ff_in.forward(&self.norm3.forward(&x)?)?.chunk(2, D::Minus1)?;
        let act = match self.gelu {
            Gelu::Erf => gate[1].gelu_erf()?,
            Gelu::Tanh => gate[1].gelu()?,
        };
        self.ff_out.forward(&(&gate[0] * act)?)? + x
    }
}

enum Proj {
    Linear(Linear),
    Conv(Conv2d),
}

struct SpatialTransformer {
    name: String,
    norm: GroupNorm,
    proj_in: Proj,
    blocks: Vec<TransformerBlock>,
    proj_out: Proj,
}

impl SpatialTransformer {
    fn new(vb: VarBuilder, name: String, channels: usize, heads: usize, cfg: &UNet2DConditionModelConfig, depth: usize, gelu: Gelu) -> Result<Self> {
        let head_dim = channels / heads;
        let proj = |vb: VarBuilder| -> Result<Proj> {
            Ok(if cfg.use_linear_projection {
                Proj::Linear(candle_nn::linear(channels, channels, vb)?)
            } else {
                Proj::Conv(candle_nn::conv2d(channels, channels, 1, Default::default(), vb)?)
            })
        };
        let tb = vb.pp("transformer_blocks");
        Ok(Self {
            name,
            norm: candle_nn::group_norm(cfg.norm_num_groups, channels, 1e-6, vb.pp("norm"))?,
            proj_in: proj(vb.pp("proj_in"))?,
            blocks: (0..depth)
                .map(|i| TransformerBlock::new(tb.pp(i), channels, heads, head_dim, cfg.cross_attention_dim, gelu))
                .collect::<Result<_>>()?,
            proj_out: proj(vb.pp("proj_out"))?,
        })
    }

    fn forward(&self, x: &Tensor, context: &Tensor, mut tap: Option<&mut Tap>) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let to_tokens = |t: Tensor| t.permute((0, 2, 3, 1))?.reshape((b, h * w, c));
        let mut y = self.norm.forward(x)?;
        y = match &self.proj_in {
            Proj::Conv(p) => to_tokens(p.forward(&y)?)?,
            Proj::Linear(p) => p.forward(&to_tokens(y)?)?,
        };
        for blk in &self.blocks {
            y = blk.forward(&y, context, &self.name, tap.as_deref_mut())?;
        }
        let to_map = |t: Tensor| t.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous();
        let y = match &self.proj_out {
            Proj::Conv(p) => p.forward(&to_map(y)?)?,
            Proj::Linear(p) => to_map(p.forward(&y)?)?,
        };
        y + x
    }
}

struct Stage {
    resnets: Vec<ResnetBlock2D>,
    attentions: Vec<SpatialTransformer>,
    /// Stride-2 convolution (down path) or nearest 2x then convolution (up path).
    resample: Option<Conv2d>,
}

pub struct TapUnet {
    config: UNet2DConditionModelConfig,
    conv_in: Conv2d,
    time_proj: Timesteps,
    time_embedding: TimestepEmbedding,
    down: Vec<Stage>,
    mid: (ResnetBlock2D, SpatialTransformer, ResnetBlock2D),
    up: Vec<Stage>,
    conv_norm_out: GroupNorm,
    conv_out: Conv2d,
}

fn conv3(vb: VarBuilder, cin: usize, cout: usize, stride: usize, padding: usize) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d(cin, cout, 3, cfg, vb)
}

impl TapUnet {
    pub fn new(vb: VarBuilder, in_channels: usize, out_channels: usize, config: UNet2DConditionModelConfig, gelu: Gelu) -> Result<Self> {
        let cfg = &config;
        let n = cfg.blocks.len();
        let b0 = cfg.blocks[0].out_channels;
        let bl = cfg.blocks[n - 1].out_channels;
        let temb = 4 * b0;
        let resnet = |vb: VarBuilder, cin: usize, cout: usize, scale: f64| {
            let rc = ResnetBlock2DConfig {
                out_channels: Some(cout),
                temb_channels: Some(temb),
                groups: cfg.norm_num_groups,
                eps: cfg.norm_eps,
                output_scale_factor: scale,
                ..Default::default()
            };
            ResnetBlock2D::new(vb, cin, rc)
        };
        let transformers = |vb: VarBuilder, prefix: String, count: usize, channels: usize, heads: usize, depth: usize| {
            (0..count)
                .map(|j| {
                    SpatialTransformer::new(vb.pp(j), format!("{prefix}.attentions.{j}"), channels, heads, cfg, depth, gelu)
                })
                .collect::<Result<Vec<_>>>()
        };

        let mut down = Vec::with_capacity(n);
        let vd = vb.pp("down_blocks");
        for (i, bc) in cfg.blocks.iter().enumerate() {
            let v = vd.pp(i);
            let cin = if i == 0 { b0 } else { cfg.blocks[i - 1].out_channels };
            let resnets = (0..cfg.layers_per_block)
                .map(|j| resnet(v.pp("resnets").pp(j), if j == 0 { cin } else { bc.out_channels }, bc.out_channels, 1.0))
                .collect::<Result<Vec<_>>>()?;
            let attentions = match bc.use_cross_attn {
                Some(depth) => transformers(v.pp("attentions"), format!("down_blocks.{i}"), cfg.layers_per_block, bc.out_channels, bc.attention_head_dim, depth)?,
                None => Vec::new(),
            };
            let resample = if i + 1 < n {
                Some(conv3(v.pp("downsamplers.0.conv"), bc.out_channels, bc.out_channels, 2, cfg.downsample_padding)?)
            } else {
                None
            };
            down.push(Stage { resnets, attentions, resample });
        }

        let vm = vb.pp("mid_block");
        let last = cfg.blocks[n - 1];
        let mid = (
            resnet(vm.pp("resnets.0"), bl, bl, cfg.mid_block_scale_factor)?,
            SpatialTransformer::new(vm.pp("attentions.0"), "mid_block.attentions.0".into(), bl, last.attention_head_dim, cfg, last.use_cross_attn.unwrap_or(1), gelu)?,
            resnet(vm.pp("resnets.1"), bl, bl, cfg.mid_block_scale_factor)?,
        );

        let mut up = Vec::with_capacity(n);
        let vu = vb.pp("up_blocks");
        for i in 0..n {
            let v = vu.pp(i);
            let bc = cfg.blocks[n - 1 - i];
            let prev = if i > 0 { cfg.blocks[n - i].out_channels } else { bl };
            let skip_in = cfg.blocks[if i == n - 1 { 0 } else { n - i - 2 }].out_channels;
            let layers = cfg.layers_per_block + 1;
            let resnets = (0..layers)
                .map(|j| {
                    let skip = if j == layers - 1 { skip_in } else { bc.out_channels };
                    let rin = if j == 0 { prev } else { bc.out_channels };
                    resnet(v.pp("resnets").pp(j), rin + skip, bc.out_channels, 1.0)
                })
                .collect::<Result<Vec<_>>>()?;
            let attentions = match bc.use_cross_attn {
                Some(depth) => transformers(v.pp("attentions"), format!("up_blocks.{i}"), layers, bc.out_channels, bc.attention_head_dim, depth)?,
                None => Vec::new(),
            };
            let resample = if i + 1 < n {
                Some(conv3(v.pp("upsamplers.0.conv"), bc.out_channels, bc.out_channels, 1, 1)?)
            } else {
                None
            };
            up.push(Stage { resnets, attentions, resample });
        }

        Ok(Self {
            conv_in: conv3(vb.pp("conv_in"), in_channels, b0, 1, 1)?,
            time_proj: Timesteps::new(b0, cfg.flip_sin_to_cos, cfg.freq_shift),
            time_embedding: TimestepEmbedding::new(vb.pp("time_embedding"), b0, temb)?,
            down,
            mid,
            up,
            conv_norm_out: candle_nn::group_norm(cfg.norm_num_groups, b0, cfg.norm_eps, vb.pp("conv_norm_out"))?,
            conv_out: conv3(vb.pp("conv_out"), b0, out_channels, 1, 1)?,
            config,
        })
    }

    pub fn config(&self) -> &UNet2DConditionModelConfig {
        &self.config
    }

    /// One denoising evaluation of `x` (`1 x C x h x w`) at `timestep`.
    /// Self-attention at the full latent resolution (`h * w` tokens) is sent
    /// to `sink`. Returns the network output.
    pub fn forward(&self, x: &Tensor, timestep: f64, context: &Tensor, mut sink: Option<Sink>) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut tap = sink.as_mut().map(|s| Tap { tokens: h * w, sink: s });
        let t = (Tensor::ones(1, x.dtype(), x.device())? * timestep)?;
        let emb = self.time_embedding.forward(&self.time_proj.forward(&t)?)?;

        let mut x = self.conv_in.forward(x)?;
        let mut skips = vec![x.clone()];
        for stage in &self.down {
            for (j, r) in stage.resnets.iter().enumerate() {
                x = r.forward(&x, Some(&emb))?;
                if let Some(a) = stage.attentions.get(j) {
                    x = a.forward(&x, context, tap.as_mut())?;
                }
                skips.push(x.clone());
            }
            if let Some(ds) = &stage.resample {
                x = ds.forward(&x)?;
                skips.push(x.clone());
            }
        }

        x = self.mid.0.forward(&x, Some(&emb))?;
        x = self.mid.1.forward(&x, context, tap.as_mut())?;
        x = self.mid.2.forward(&x, Some(&emb))?;

        for stage in &self.up {
            for (j, r) in stage.resnets.iter().enumerate() {
                let skip = skips.pop().expect("one skip per up resnet");
                x = Tensor::cat(&[&x, &skip], 1)?.contiguous()?;
                x = r.forward(&x, Some(&emb))?;
                if let Some(a) = stage.attentions.get(j) {
                    x = a.forward(&x, context, tap.as_mut())?;
                }
            }
            if let Some(us) = &stage.resample {
                let (_, _, sh, sw) = skips.last().expect("skips remain below the top").dims4()?;
                x = us.forward(&x.upsample_nearest2d(sh, sw)?)?;
            }
        }
        let x = candle_nn::ops::silu(&self.conv_norm_out.forward(&x)?)?;
        self.conv_out.forward(&x)
    }
}
