//! Recorded model outputs that stand in for live encoder and diffusion calls.
//!
//! A replay directory holds one subdirectory per sample id:
//!
//! ```text
//! <root>/<id>/scores.safetensors        coarse score map, H x W x C
//! <root>/<id>/sd_attention.safetensors  diffusion self-attention, heads x L x L
//! ```
//!
//! each with its `.meta.json` sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::StackAxis;
use crate::diffusion::SdAttention;
use crate::error::{Error, Result};
use crate::fixture::{array_to_stack, stack_to_array, to_2d, to_3d, Fixture};
use crate::fusion::{EncoderTrace, LayerAttention};
use crate::segment::ScoreMap;

pub const SCORES: &str = "scores";
pub const SD_ATTENTION: &str = "sd_attention";

#[derive(Debug, Serialize, Deserialize)]
struct ScoreColumns {
    column_labels: Vec<u16>,
    background_column: Option<usize>,
    includes_background: bool,
}

pub fn scores_to_fixture(map: &ScoreMap) -> Fixture {
    let mut f = Fixture::new(SCORES);
    f.insert("scores", map.scores.clone().into_dyn());
    f.meta.config = serde_json::to_value(ScoreColumns {
        column_labels: map.column_labels.clone(),
        background_column: map.background_column,
        includes_background: map.includes_background,
    })
    .expect("plain data");
    f
}

pub fn scores_from_fixture(f: &Fixture) -> Result<ScoreMap> {
    let cols: ScoreColumns = serde_json::from_value(f.meta.config.clone())
        .map_err(|e| Error::validation(format!("score fixture metadata: {e}")))?;
    ScoreMap::new(
        to_3d(f.get("scores")?)?,
        cols.column_labels,
        cols.background_column,
        cols.includes_background,
    )
}

pub fn sd_attention_to_fixture(att: &SdAttention) -> Fixture {
    let mut f = Fixture::new(SD_ATTENTION);
    f.insert("maps", stack_to_array(&att.stack));
    f.meta.head_order = (0..att.heads()).map(|h| format!("head{h}")).collect();
    f.meta.config = serde_json::json!({ "grid_side": att.grid_side });
    f
}

pub fn sd_attention_from_fixture(f: &Fixture) -> Result<SdAttention> {
    SdAttention::new(array_to_stack(f.get("maps")?, StackAxis::Heads)?)
}

/// One fixture per early layer: `F` (T x D) and `maps` (1 or H x T x T).
pub fn trace_to_fixtures(trace: &EncoderTrace) -> Vec<Fixture> {
    trace
        .layers
        .iter()
        .map(|l| {
            let mut f = Fixture::new("layer_trace");
            f.insert("F", l.embeddings.data().clone().into_dyn());
            let maps = match &l.attention {
                LayerAttention::Averaged(m) => {
                    let t = m.tokens();
                    m.data().as_standard_layout().into_owned().into_shape_with_order((1, t, t)).expect("square").into_dyn()
                }
                LayerAttention::PerHead(stack) => {
                    f.meta.head_order = (0..stack.len()).map(|h| format!("head{h}")).collect();
                    stack_to_array(stack)
                }
            };
            f.insert("maps", maps);
            f.meta.config = serde_json::json!({
                "layer_index": l.layer_index,
                "grid": [trace.grid.0, trace.grid.1],
                "depth": trace.depth,
            });
            f
        })
        .collect()
}

/// Embedding matrix of a layer-trace fixture.
pub fn trace_embeddings(f: &Fixture) -> Result<ndarray::Array2<f32>> {
    to_2d(f.get("F")?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStore {
    root: PathBuf,
}

impl ReplayStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, id: &str, kind: &str) -> PathBuf {
        self.root.join(id).join(format!("{kind}.safetensors"))
    }

    fn load(&self, id: &str, kind: &str) -> Result<Fixture> {
        let p = self.path(id, kind);
        if !p.is_file() {
            return Err(Error::data(&p, format!("no recorded {kind} for sample `{id}`")));
        }
        Fixture::load(&p)
    }

    fn save(&self, id: &str, kind: &str, f: &Fixture) -> Result<()> {
        let p = self.path(id, kind);
        let dir = p.parent().expect("joined path");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        f.save(&p)
    }

    pub fn scores(&self, id: &str) -> Result<ScoreMap> {
        scores_from_fixture(&self.load(id, SCORES)?)
    }

    pub fn sd_attention(&self, id: &str) -> Result<SdAttention> {
        sd_attention_from_fixture(&self.load(id, SD_ATTENTION)?)
    }

    pub fn write_scores(&self, id: &str, map: &ScoreMap) -> Result<()> {
        self.save(id, SCORES, &scores_to_fixture(map))
    }

    pub fn write_sd_attention(&self, id: &str, att: &SdAttention) -> Result<()> {
        self.save(id, SD_ATTENTION, &sd_attention_to_fixture(att))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionStack, SquareMap};
    use crate::fusion::HeadPolicy;
    use crate::backend::ImageEncoder;
    use crate::preprocess::prepare_encoder_input;
    use crate::toy::{ToyConfig, ToyVit};
    use ndarray::Array3;

    #[test]
    fn scores_and_attention_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::new(dir.path());
        let map = ScoreMap::new(
            Array3::from_shape_fn((2, 3, 3), |(y, x, c)| (y + 2 * x) as f32 - c as f32 * 0.5),
            vec![0, 1, 4],
            Some(0),
            true,
        )
        .unwrap();
        store.write_scores("a", &map).unwrap();
        assert_eq!(store.scores("a").unwrap(), map);
        let att = SdAttention::new(
            AttentionStack::new(vec![SquareMap::identity(4), SquareMap::uniform(4)], StackAxis::Heads).unwrap(),
        )
        .unwrap();
        store.write_sd_attention("a", &att).unwrap();
        assert_eq!(store.sd_attention("a").unwrap(), att);
        let err = store.scores("missing").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn trace_fixtures_cover_early_layers() {
        let vit = ToyVit::random(ToyConfig::tiny(), 3).unwrap();
        let img = image::RgbImage::from_fn(8, 8, |x, y| image::Rgb([(x * 30) as u8, (y * 30) as u8, 7]));
        let prep = prepare_encoder_input(&img, 8, 4, vit.info().stats).unwrap();
        for policy in [HeadPolicy::Mean, HeadPolicy::PerHeadPassthrough] {
            let trace = vit.trace(&prep, policy).unwrap();
            let fx = trace_to_fixtures(&trace);
            assert_eq!(fx.len(), trace.depth - 1);
            for (f, l) in fx.iter().zip(&trace.layers) {
                assert_eq!(&trace_embeddings(f).unwrap(), l.embeddings.data());
                let stack = array_to_stack(f.get("maps").unwrap(), StackAxis::Heads).unwrap();
                assert_eq!(stack.len(), if policy == HeadPolicy::Mean { 1 } else { 2 });
            }
        }
    }
}
