//! End-to-end segmentation of one image.

use std::sync::Arc;

use image::RgbImage;

use crate::backend::{AttentionExtractor, ImageEncoder, TextEncoder};
use crate::compensation::{compensate, upsample_scores};
use crate::config::PipelineConfig;
use crate::diffusion::SdAttention;
use crate::error::{Error, Result};
use crate::fusion::{fuse, EncoderTrace, HeadPolicy};
use crate::preprocess::prepare_encoder_input;
use crate::replay::ReplayStore;
use crate::segment::{
    assign_labels_within, embed_categories, similarity_scores, CategorySet, LabelMap, ScoreMap, Subset, TextEmbeddings,
};
use crate::timing::{Stage, StageTimer, StageTimes};

/// Where coarse score maps come from.
pub enum CoarseSource {
    Live {
        encoder: Arc<dyn ImageEncoder>,
        text: TextEmbeddings,
    },
    Replay(ReplayStore),
}

/// Where diffusion attention comes from.
pub enum AttentionSourceKind {
    Live(Arc<dyn AttentionExtractor>),
    Replay(ReplayStore),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// Scores on the encoder's patch grid.
    pub coarse: ScoreMap,
    pub sd_attention: Option<SdAttention>,
    /// Scores at the input image's resolution.
    pub scores: ScoreMap,
    pub labels: LabelMap,
    pub times: StageTimes,
}

pub struct Pipeline {
    config: PipelineConfig,
    categories: CategorySet,
    coarse: CoarseSource,
    refine: Option<AttentionSourceKind>,
    text_millis: f64,
}

impl Pipeline {
    /// `refine` must be present exactly when compensation is enabled.
    pub fn new(
        config: PipelineConfig,
        categories: CategorySet,
        coarse: CoarseSource,
        refine: Option<AttentionSourceKind>,
    ) -> Result<Self> {
        config.validate()?;
        categories.validate()?;
        match (config.compensation.enabled, refine.is_some()) {
            (true, false) => return Err(Error::config("compensation is enabled but no diffusion attention source is set")),
            (false, true) => return Err(Error::config("diffusion attention source given with compensation disabled")),
            _ => {}
        }
        if let CoarseSource::Live { text, .. } = &coarse {
            if text.columns() != categories.len() + usize::from(categories.background.is_some()) {
                return Err(Error::validation("text embeddings do not match the category set"));
            }
        }
        Ok(Self {
            config,
            categories,
            coarse,
            refine,
            text_millis: 0.0,
        })
    }

    /// Live pipeline: embeds the category names once up front.
    pub fn live(
        config: PipelineConfig,
        categories: CategorySet,
        encoder: Arc<dyn ImageEncoder>,
        text_encoder: &dyn TextEncoder,
        extractor: Option<Arc<dyn AttentionExtractor>>,
    ) -> Result<Self> {
        let t0 = std::time::Instant::now();
        let text = embed_categories(&categories, text_encoder)?;
        let text_millis = t0.elapsed().as_secs_f64() * 1e3;
        let refine = if config.compensation.enabled {
            Some(AttentionSourceKind::Live(extractor.ok_or_else(|| {
                Error::environment("compensation needs a diffusion backend")
            })?))
        } else {
            None
        };
        let mut p = Self::new(config, categories, CoarseSource::Live { encoder, text }, refine)?;
        p.text_millis = text_millis;
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn categories(&self) -> &CategorySet {
        &self.categories
    }

    /// One-off cost of embedding the category names, in milliseconds.
    pub fn text_millis(&self) -> f64 {
        self.text_millis
    }

    /// Runs the encoder's early layers on `image`; live sources only.
    pub fn trace(&self, image: &RgbImage, policy: HeadPolicy) -> Result<EncoderTrace> {
        match &self.coarse {
            CoarseSource::Live { encoder, .. } => {
                let info = encoder.info();
                let prep = prepare_encoder_input(image, self.config.input_short_side, info.patch_size, info.stats)?;
                encoder.trace(&prep, policy)
            }
            CoarseSource::Replay(_) => Err(Error::config("layer traces need a live encoder, not replay")),
        }
    }

    fn coarse_scores(&self, id: &str, image: &RgbImage, timer: &mut StageTimer) -> Result<ScoreMap> {
        match &self.coarse {
            CoarseSource::Live { encoder, text } => {
                let trace = timer.time(Stage::Encoder, || self.trace(image, HeadPolicy::Mean))?;
                let last = encoder.last_block();
                let fused = timer.time(Stage::Fusion, || fuse(&trace, &last, &self.config.fusion))?;
                timer.time(Stage::Text, || similarity_scores(&fused, text))
            }
            CoarseSource::Replay(store) => {
                let map = timer.time(Stage::Encoder, || store.scores(id))?;
                let expected = self.categories.len() + usize::from(self.categories.background.is_some());
                if map.columns() != expected {
                    return Err(Error::validation(format!(
                        "recorded scores for `{id}` have {} columns, the category set needs {expected}",
                        map.columns()
                    )));
                }
                Ok(map)
            }
        }
    }

    fn attention(&self, id: &str, image: &RgbImage) -> Result<Option<SdAttention>> {
        match &self.refine {
            None => Ok(None),
            Some(AttentionSourceKind::Live(x)) => x.extract(image, &self.config.extraction, self.config.seed).map(Some),
            Some(AttentionSourceKind::Replay(store)) => store.sd_attention(id).map(Some),
        }
    }

    /// Segments `image`. `subset` limits the categories that labelling may
    /// choose; scores are still computed for every category.
    pub fn run(&self, id: &str, image: &RgbImage, subset: Option<&Subset>) -> Result<Segmentation> {
        let mut timer = StageTimer::new();
        let (h, w) = (image.height() as usize, image.width() as usize);
        let coarse = self.coarse_scores(id, image, &mut timer)?;
        let sd_attention = timer.time(Stage::Diffusion, || self.attention(id, image))?;
        let scores = timer.time(Stage::Compensation, || match &sd_attention {
            Some(att) => compensate(&coarse, att, h, w, &self.config.compensation).map(|r| r.final_scores),
            None => upsample_scores(&coarse, h, w, self.config.compensation.interpolation),
        })?;
        let allowed: Option<Vec<u16>> =
            subset.map(|s| s.categories.iter().map(|&k| self.categories.label_of(k)).collect());
        let labels = assign_labels_within(&scores, &self.config.labels, allowed.as_deref())?;
        Ok(Segmentation {
            coarse,
            sd_attention,
            scores,
            labels,
            times: timer.finish(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionStack, SquareMap, StackAxis};
    use crate::segment::tests::HashEncoder;
    use crate::segment::{TemplateSet, BACKGROUND};
    use crate::toy::{ToyConfig, ToyVit};
    use ndarray::Array3;

    fn img(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 13 % 256) as u8, (y * 7 % 256) as u8, ((x + y) * 5 % 256) as u8]))
    }

    fn toy_cfg() -> PipelineConfig {
        let mut c = PipelineConfig {
            backbone: "toy".into(),
            input_short_side: 8,
            ..Default::default()
        };
        c.compensation.enabled = false;
        c
    }

    #[test]
    fn single_category_without_background_labels_everything() {
        let set = CategorySet::from_names(&["cat"], false, TemplateSet::Single).unwrap();
        let enc: Arc<dyn ImageEncoder> = Arc::new(ToyVit::random(ToyConfig::tiny(), 1).unwrap());
        let text = HashEncoder { width: 6 };
        let p = Pipeline::live(toy_cfg(), set, enc, &text, None).unwrap();
        let out = p.run("x", &img(12, 9), None).unwrap();
        assert_eq!(out.labels.dim(), (9, 12));
        assert!(out.labels.0.iter().all(|&l| l == 0));
        assert_eq!(out.coarse.resolution(), (2, 3));
        assert!(out.times.millis(Stage::Encoder).is_some());
    }

    #[test]
    fn live_runs_are_deterministic() {
        let set = CategorySet::from_names(&["cat", "dog", "sky"], true, TemplateSet::Single).unwrap();
        let mk = || {
            let enc: Arc<dyn ImageEncoder> = Arc::new(ToyVit::random(ToyConfig::tiny(), 5).unwrap());
            Pipeline::live(toy_cfg(), set.clone(), enc, &HashEncoder { width: 6 }, None).unwrap()
        };
        let a = mk().run("x", &img(16, 16), None).unwrap();
        let b = mk().run("x", &img(16, 16), None).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn replay_with_identity_attention_matches_no_compensation() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::new(dir.path());
        let set = CategorySet::from_names(&["a", "b"], true, TemplateSet::Single).unwrap();
        let scores = Array3::from_shape_fn((4, 4, 2), |(y, x, c)| if (x + y + c) % 2 == 0 { 0.9 } else { 0.1 });
        let map = ScoreMap::new(scores, vec![1, 2], None, true).unwrap();
        store.write_scores("s", &map).unwrap();
        let id = SdAttention::new(AttentionStack::new(vec![SquareMap::identity(16); 3], StackAxis::Heads).unwrap())
            .unwrap();
        store.write_sd_attention("s", &id).unwrap();

        let mut off = toy_cfg();
        off.replay = Some(dir.path().into());
        let mut on = off.clone();
        on.compensation.enabled = true;
        let p_off = Pipeline::new(off, set.clone(), CoarseSource::Replay(store.clone()), None).unwrap();
        let p_on = Pipeline::new(
            on,
            set,
            CoarseSource::Replay(store.clone()),
            Some(AttentionSourceKind::Replay(store)),
        )
        .unwrap();
        let a = p_off.run("s", &img(4, 4), None).unwrap();
        let b = p_on.run("s", &img(4, 4), None).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn subset_never_introduces_other_labels() {
        let dir = tempfile::tempdir().unwrap();
        let store = ReplayStore::new(dir.path());
        let set = CategorySet::from_names(&["a", "b", "c"], true, TemplateSet::Single).unwrap();
        let scores = Array3::from_shape_fn((3, 3, 3), |(y, x, c)| ((y * 3 + x + c * 5) % 7) as f32);
        store
            .write_scores("s", &ScoreMap::new(scores, vec![1, 2, 3], None, true).unwrap())
            .unwrap();
        let mut cfg = toy_cfg();
        cfg.replay = Some(dir.path().into());
        let p = Pipeline::new(cfg, set.clone(), CoarseSource::Replay(store), None).unwrap();
        let subset = set.restrict(&[1]).unwrap();
        let out = p.run("s", &img(3, 3), Some(&subset)).unwrap();
        assert!(out.labels.0.iter().all(|&l| l == 2 || l == BACKGROUND));
    }

    #[test]
    fn compensation_without_source_is_rejected() {
        let set = CategorySet::from_names(&["a"], false, TemplateSet::Single).unwrap();
        let mut cfg = toy_cfg();
        cfg.compensation.enabled = true;
        let err = Pipeline::new(cfg, set, CoarseSource::Replay(ReplayStore::new("/nonexistent")), None);
        assert_eq!(err.err().unwrap().exit_code(), 2);
    }
}
