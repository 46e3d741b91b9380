//! Interfaces implemented by model backends.

use std::sync::Arc;

use image::RgbImage;
use ndarray::Array2;

use crate::diffusion::{ExtractionConfig, SdAttention};
use crate::error::Result;
use crate::fusion::{EncoderTrace, HeadPolicy, LastBlockWeights};
use crate::preprocess::{ChannelStats, PreparedImage};

/// Architecture constants of a loaded image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInfo {
    pub backbone_id: String,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub joint_width: usize,
    pub stats: ChannelStats,
}

/// A vision transformer that can run its first `depth - 1` blocks while
/// recording each block's output and attention.
pub trait ImageEncoder: Send + Sync {
    fn info(&self) -> &EncoderInfo;

    fn trace(&self, input: &PreparedImage, policy: HeadPolicy) -> Result<EncoderTrace>;

    fn last_block(&self) -> Arc<LastBlockWeights>;
}

/// Maps prompts into the joint space. Rows are returned unnormalised.
pub trait TextEncoder: Send + Sync {
    fn joint_width(&self) -> usize;

    fn embed(&self, prompts: &[String]) -> Result<Array2<f32>>;
}

/// Produces the per-head self-attention maps of a diffusion model for one
/// image.
pub trait AttentionExtractor: Send + Sync {
    fn extract(&self, image: &RgbImage, cfg: &ExtractionConfig, seed: u64) -> Result<SdAttention>;
}
