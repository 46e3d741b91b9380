//! Pretrained backends for hiseg: the CLIP image and text encoders and the
//! diffusion self-attention extractor, all on candle.

pub mod clip_text;
pub mod clip_vision;
pub mod sd;
pub mod tensor;
pub mod weights;

pub use clip_text::ClipText;
pub use clip_vision::{ClipVision, VisionConfig};
pub use sd::SdExtractor;
pub use weights::{ResolvedWeights, WeightsManifest, WeightsRoot};

use candle_core::Device;

/// First CUDA device when built with the `cuda` feature and one is present,
/// otherwise the CPU.
pub fn default_device() -> Device {
    Device::cuda_if_available(0).unwrap_or(Device::Cpu)
}
