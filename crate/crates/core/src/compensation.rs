//! Refinement of coarse scores with diffusion self-attention.
//!
//! The per-head maps are fused into one token-to-token operator (by default
//! the ordered product of all heads), the coarse score map is resampled onto
//! the diffusion grid, multiplied by the operator, and finally upsampled to
//! image resolution.

use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::attention::{average_maps, chain_multiply_heads, refine_scores, Normalizer, SquareMap};
use crate::diffusion::SdAttention;
use crate::error::{Error, Result};
use crate::resample::{resize_hwc, Interpolation};
use crate::segment::ScoreMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadFusion {
    /// `A[0] × A[1] × … × A[H-1]`.
    #[default]
    Multiply,
    Mean,
    /// One head, chosen by `head_index`.
    Single,
}

impl FromStr for HeadFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiply" => Ok(HeadFusion::Multiply),
            "mean" => Ok(HeadFusion::Mean),
            "single" => Ok(HeadFusion::Single),
            other => Err(Error::config(format!("unknown head fusion `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompensationConfig {
    pub enabled: bool,
    pub interpolation: Interpolation,
    pub head_fusion: HeadFusion,
    pub head_index: usize,
    /// Divide each row of the fused operator by its sum before use.
    pub renormalize_rows: bool,
}

impl Default for CompensationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interpolation: Interpolation::Bilinear,
            head_fusion: HeadFusion::Multiply,
            head_index: 0,
            renormalize_rows: false,
        }
    }
}

/// Scores on the diffusion grid and at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub refined: ScoreMap,
    pub final_scores: ScoreMap,
}

/// Resamples every category channel to `side x side` and flattens row-major
/// into a `side² x C` matrix.
pub fn align_scores(scores: &ScoreMap, side: usize, interp: Interpolation) -> Result<Array2<f32>> {
    if side == 0 {
        return Err(Error::validation("alignment target must be a non-empty square grid"));
    }
    let c = scores.columns();
    let resized = resize_hwc(scores.view(), side, side, interp)?;
    Ok(resized.into_shape_with_order((side * side, c)).expect("standard layout"))
}

/// Collapses the per-head stack into one operator.
pub fn fuse_heads(att: &SdAttention, cfg: &CompensationConfig) -> Result<SquareMap> {
    let fused = match cfg.head_fusion {
        HeadFusion::Multiply => chain_multiply_heads(&att.stack)?,
        HeadFusion::Mean => average_maps(&att.stack, Normalizer::Count)?,
        HeadFusion::Single => att
            .stack
            .maps()
            .get(cfg.head_index)
            .cloned()
            .ok_or_else(|| {
                Error::config(format!("head index {} but only {} heads", cfg.head_index, att.heads()))
            })?,
    };
    Ok(if cfg.renormalize_rows {
        fused.renormalize_rows()
    } else {
        fused
    })
}

/// `A[0] (A[1] ( … (A[H-1] S)))`: the same value as multiplying by the chain
/// product, at `O(H T² C)` instead of `O(H T³)`.
pub fn apply_chain(att: &SdAttention, scores: &Array2<f32>) -> Result<Array2<f32>> {
    let maps = att.stack.maps();
    if maps.is_empty() {
        return Err(Error::validation("cannot chain an empty attention stack"));
    }
    let mut acc = scores.clone();
    for m in maps.iter().rev() {
        acc = refine_scores(m, acc.view())?;
    }
    Ok(acc)
}

pub fn upsample_scores(scores: &ScoreMap, height: usize, width: usize, interp: Interpolation) -> Result<ScoreMap> {
    scores.with_scores(resize_hwc(scores.view(), height, width, interp)?)
}

/// Refines `coarse` with the diffusion attention and upsamples the result to
/// `height x width`.
pub fn compensate(
    coarse: &ScoreMap,
    att: &SdAttention,
    height: usize,
    width: usize,
    cfg: &CompensationConfig,
) -> Result<RefinementResult> {
    let side = att.grid_side;
    let aligned = align_scores(coarse, side, cfg.interpolation)?;
    let refined_flat = if cfg.head_fusion == HeadFusion::Multiply && !cfg.renormalize_rows {
        apply_chain(att, &aligned)?
    } else {
        refine_scores(&fuse_heads(att, cfg)?, aligned.view())?
    };
    let c = coarse.columns();
    let refined = coarse.with_scores(
        Array3::from_shape_vec((side, side, c), refined_flat.into_raw_vec_and_offset().0).expect("side² x C"),
    )?;
    let final_scores = upsample_scores(&refined, height, width, cfg.interpolation)?;
    Ok(RefinementResult {
        refined,
        final_scores,
    })
}
