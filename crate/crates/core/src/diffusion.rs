//! Diffusion-side configuration, noise schedule and attention containers.
//!
//! The denoising network itself lives in a backend crate; this module holds
//! the weight-free parts: which timestep to evaluate, how a clean latent is
//! forward-noised, and how self-attention maps from several blocks that share
//! the largest token count are combined into one per-head stack.

use std::str::FromStr;

use ndarray::{Array, Array2, ArrayD, Dimension, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionStack, SquareMap, StackAxis, STOCHASTIC_TOL};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionPolicy {
    #[default]
    HighestOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerCombine {
    /// Per-head mean over blocks; keeps the head count of one block.
    #[default]
    Mean,
    /// Every block's heads appended in block order.
    ConcatHeads,
}

impl FromStr for LayerCombine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LayerCombine::Mean),
            "concat_heads" => Ok(LayerCombine::ConcatHeads),
            other => Err(Error::config(format!("unknown layer combine `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub timestep_index: usize,
    pub total_steps: usize,
    pub resolution_policy: ResolutionPolicy,
    pub layer_combine: LayerCombine,
    /// Side of the square image fed to the autoencoder.
    pub input_side: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            timestep_index: 45,
            total_steps: 50,
            resolution_policy: ResolutionPolicy::HighestOnly,
            layer_combine: LayerCombine::Mean,
            input_side: 512,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.timestep_index >= self.total_steps {
            return Err(Error::validation(format!(
                "timestep index {} outside 0..{}",
                self.timestep_index, self.total_steps
            )));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(64) {
            return Err(Error::config(format!(
                "diffusion input side {} must be a positive multiple of 64",
                self.input_side
            )));
        }
        Ok(())
    }
}

/// Discrete DDPM-style schedule described by its cumulative alphas.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub alphas_cumprod: Vec<f64>,
    pub steps_offset: usize,
}

impl NoiseSchedule {
    /// Betas linear in square-root space between `beta_start` and `beta_end`.
    pub fn scaled_linear(beta_start: f64, beta_end: f64, train_steps: usize, steps_offset: usize) -> Self {
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0;
        let alphas_cumprod = (0..train_steps)
            .map(|i| {
                let f = if train_steps > 1 { i as f64 / (train_steps - 1) as f64 } else { 0.0 };
                let beta = (a + (b - a) * f).powi(2);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self {
            alphas_cumprod,
            steps_offset,
        }
    }

    /// Schedule shipped with Stable Diffusion 2.x.
    pub fn stable_diffusion() -> Self {
        Self::scaled_linear(0.00085, 0.012, 1000, 1)
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    /// Inference timesteps, noisiest first, with "leading" spacing.
    pub fn timesteps(&self, total_steps: usize) -> Result<Vec<usize>> {
        if total_steps == 0 || total_steps > self.train_steps() {
            return Err(Error::validation(format!(
                "{total_steps} inference steps for a {}-step schedule",
                self.train_steps()
            )));
        }
        let ratio = self.train_steps() / total_steps;
        Ok((0..total_steps)
            .rev()
            .map(|i| (i * ratio + self.steps_offset).min(self.train_steps() - 1))
            .collect())
    }

    pub fn timestep_at(&self, cfg: &ExtractionConfig) -> Result<usize> {
        cfg.validate()?;
        Ok(self.timesteps(cfg.total_steps)?[cfg.timestep_index])
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let abar = *self
            .alphas_cumprod
            .get(t)
            .ok_or_else(|| Error::validation(format!("timestep {t} beyond schedule")))?;
        Ok((abar.sqrt(), (1.0 - abar).sqrt()))
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    pub fn add_noise<D: Dimension>(
        &self,
        clean: &Array<f32, D>,
        noise: &Array<f32, D>,
        t: usize,
    ) -> Result<Array<f32, D>> {
        if clean.shape() != noise.shape() {
            return Err(Error::shape("latent and noise shapes differ"));
        }
        let (a, b) = self.coefficients(t)?;
        let (a, b) = (a as f32, b as f32);
        let mut out = clean.clone();
        out.zip_mut_with(noise, |x, &n| *x = a * *x + b * n);
        Ok(out)
    }
}

/// Standard-normal noise from a seeded ChaCha20 stream, filled row-major.
pub fn gaussian_noise(shape: &[usize], seed: u64) -> ArrayD<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(&mut rng))
}

/// Per-head self-attention maps over a square latent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SdAttention {
    pub stack: AttentionStack,
    pub grid_side: usize,
}

impl SdAttention {
    pub fn new(stack: AttentionStack) -> Result<Self> {
        if stack.axis() != StackAxis::Heads {
            return Err(Error::validation("diffusion attention must be stored per head"));
        }
        let tokens = stack
            .tokens()
            .ok_or_else(|| Error::validation("diffusion attention has no heads"))?;
        let side = (tokens as f64).sqrt().round() as usize;
        if side * side != tokens {
            return Err(Error::validation(format!("{tokens} tokens do not form a square grid")));
        }
        for (h, m) in stack.maps().iter().enumerate() {
            m.check_stochastic(STOCHASTIC_TOL)
                .map_err(|e| Error::validation(format!("head {h}: {e}")))?;
        }
        Ok(Self {
            stack,
            grid_side: side,
        })
    }

    pub fn heads(&self) -> usize {
        self.stack.len()
    }

    pub fn tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }
}

/// Collects per-head maps block by block and combines them.
///
/// In `Mean` mode only a running sum is kept, so memory stays at one block's
/// worth of maps regardless of how many blocks contribute.
#[derive(Debug)]
pub struct HeadAccumulator {
    mode: LayerCombine,
    blocks: usize,
    maps: Vec<Array2<f32>>,
}

impl HeadAccumulator {
    pub fn new(mode: LayerCombine) -> Self {
        Self {
            mode,
            blocks: 0,
            maps: Vec::new(),
        }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn push(&mut self, heads: Vec<Array2<f32>>) -> Result<()> {
        if heads.is_empty() {
            return Err(Error::validation("block contributed no heads"));
        }
        if let Some(first) = self.maps.first() {
            if heads.iter().any(|h| h.dim() != first.dim()) {
                return Err(Error::shape("blocks at the target resolution differ in token count"));
            }
        }
        match self.mode {
            LayerCombine::ConcatHeads => self.maps.extend(heads),
            LayerCombine::Mean if self.blocks == 0 => self.maps = heads,
            LayerCombine::Mean => {
                if heads.len() != self.maps.len() {
                    return Err(Error::shape(format!(
                        "mean combine needs equal head counts, got {} and {}",
                        self.maps.len(),
                        heads.len()
                    )));
                }
                for (acc, h) in self.maps.iter_mut().zip(&heads) {
                    *acc += h;
                }
            }
        }
        self.blocks += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SdAttention> {
        if self.blocks == 0 {
            return Err(Error::environment("no self-attention blocks at the target resolution"));
        }
        let n = self.blocks as f32;
        let maps = self
            .maps
            .into_iter()
            .map(|mut m| {
                if self.mode == LayerCombine::Mean && self.blocks > 1 {
                    m.mapv_inplace(|v| v / n);
                }
                SquareMap::stochastic(m)
            })
            .collect::<Result<Vec<_>>>()?;
        SdAttention::new(AttentionStack::new(maps, StackAxis::Heads)?)
    }
}

/// Combines already collected blocks.
pub fn combine_blocks(blocks: Vec<Vec<Array2<f32>>>, mode: LayerCombine) -> Result<SdAttention> {
    let mut acc = HeadAccumulator::new(mode);
    for b in blocks {
        acc.push(b)?;
    }
    acc.finish()
}
