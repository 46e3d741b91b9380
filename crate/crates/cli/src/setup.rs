//! Configuration resolution and backend construction shared by the verbs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use hiseg_core::backend::{AttentionExtractor, ImageEncoder, TextEncoder};
use hiseg_core::config::PipelineConfig;
use hiseg_core::pipeline::{AttentionSourceKind, CoarseSource, Pipeline};
use hiseg_core::replay::ReplayStore;
use hiseg_core::segment::{embed_categories, CategoryGroup, CategorySet};
use hiseg_core::toy::{HashText, ToyConfig, ToyVit};
use hiseg_core::{Error, Result};
use hiseg_models::{default_device, ClipText, ClipVision, SdExtractor, VisionConfig, WeightsRoot};
use image::RgbImage;

use crate::args::{CategoryArgs, Common, DataArgs};

/// Backbone with random weights, for smoke runs and tests without downloads.
pub const TOY_BACKBONE: &str = "toy";

/// Defaults, then `base` (a config file or a manifest snapshot), then
/// `--set`, then the dedicated flags.
pub fn resolve_config(common: &Common, base: Option<PipelineConfig>) -> Result<PipelineConfig> {
    let mut cfg = match base {
        Some(c) => c,
        None => match &common.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        },
    };
    for s in &common.set {
        cfg.set(s)?;
    }
    if let Some(b) = &common.backbone {
        cfg.backbone = b.clone();
    }
    if common.no_compensation {
        cfg.compensation.enabled = false;
    }
    if let Some(l) = common.limit {
        cfg.eval.limit = Some(l);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    if let Some(r) = &common.replay {
        cfg.replay = Some(r.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_data_args(cfg: &mut PipelineConfig, data: &DataArgs) {
    if let Some(d) = data.dataset {
        cfg.dataset.id = Some(d);
    }
    if let Some(r) = &data.data_root {
        cfg.dataset.root = Some(r.clone());
    }
    if let Some(s) = &data.split {
        cfg.dataset.split = Some(s.clone());
    }
}

pub fn categories(args: &CategoryArgs, cfg: &PipelineConfig) -> Result<CategorySet> {
    let with_bg = !args.no_background;
    if let Some(path) = &args.classes {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return CategorySet::parse(&text, with_bg, cfg.templates);
    }
    if args.category.is_empty() {
        return Err(Error::config("no categories given (use --category or --classes)"));
    }
    let groups = args
        .category
        .iter()
        .map(|c| CategoryGroup::new(c.split(',').map(str::trim)))
        .collect::<Result<Vec<_>>>()?;
    CategorySet::new(groups, None, with_bg, cfg.templates)
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(Error::data(path, "image not found"));
    }
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::data(path, format!("cannot decode image: {e}")))
}

/// Sample id of a standalone image: its file stem.
pub fn image_id(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

pub fn out_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Which model families a verb needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Need {
    pub clip: bool,
    pub diffusion: bool,
}

/// Loaded backends, or the replay store standing in for them.
pub struct Models {
    pub encoder: Option<Arc<dyn ImageEncoder>>,
    pub text: Option<Box<dyn TextEncoder>>,
    pub extractor: Option<Arc<dyn AttentionExtractor>>,
    pub replay: Option<ReplayStore>,
    pub checksums: BTreeMap<String, String>,
}

impl Models {
    /// Resolves and loads everything `need` asks for before any image is
    /// processed, so missing weights fail fast.
    pub fn load(cfg: &PipelineConfig, need: Need) -> Result<Self> {
        let mut m = Models {
            encoder: None,
            text: None,
            extractor: None,
            replay: None,
            checksums: BTreeMap::new(),
        };
        if let Some(root) = &cfg.replay {
            m.replay = Some(ReplayStore::new(root));
            return Ok(m);
        }
        if cfg.backbone == TOY_BACKBONE {
            if need.diffusion {
                return Err(Error::config(
                    "the toy backbone has no diffusion model; pass --no-compensation or --replay",
                ));
            }
            let enc = ToyVit::random(ToyConfig::tiny(), 0)?;
            let width = enc.config.joint_width;
            m.encoder = Some(Arc::new(enc));
            m.text = Some(Box::new(HashText { width }));
            return Ok(m);
        }
        let vision = if need.clip { Some(VisionConfig::for_backbone(&cfg.backbone)?) } else { None };
        let root = WeightsRoot::from_env();
        let device = default_device();
        if let Some(vc) = vision {
            let w = root.resolve(&cfg.backbone)?;
            let model = w.path("model.safetensors")?;
            log::info!("loading {} from {}", cfg.backbone, w.dir.display());
            m.encoder = Some(Arc::new(ClipVision::from_file(model, vc, &cfg.backbone, &device)?));
            m.text = Some(Box::new(ClipText::from_files(model, w.path("tokenizer.json")?, &cfg.backbone, &device)?));
            m.checksums.extend(w.checksums.clone());
        }
        if need.diffusion {
            let w = root.resolve("sd")?;
            log::info!("loading diffusion model from {}", w.dir.display());
            m.extractor = Some(Arc::new(SdExtractor::load(&w, &device)?));
            m.checksums.extend(w.checksums.clone());
        }
        Ok(m)
    }

    pub fn for_pipeline(cfg: &PipelineConfig) -> Result<Self> {
        Self::load(
            cfg,
            Need {
                clip: true,
                diffusion: cfg.compensation.enabled,
            },
        )
    }

    /// Builds the pipeline; also returns the text-embedding time in ms.
    pub fn pipeline(&self, cfg: &PipelineConfig, cats: CategorySet) -> Result<(Pipeline, f64)> {
        if let Some(store) = &self.replay {
            let refine = cfg.compensation.enabled.then(|| AttentionSourceKind::Replay(store.clone()));
            return Ok((Pipeline::new(cfg.clone(), cats, CoarseSource::Replay(store.clone()), refine)?, 0.0));
        }
        let (Some(encoder), Some(text)) = (&self.encoder, &self.text) else {
            return Err(Error::config("no image encoder loaded"));
        };
        let t0 = Instant::now();
        let text = embed_categories(&cats, text.as_ref())?;
        let text_ms = t0.elapsed().as_secs_f64() * 1e3;
        let refine = match (&self.extractor, cfg.compensation.enabled) {
            (Some(x), true) => Some(AttentionSourceKind::Live(x.clone())),
            (None, true) => return Err(Error::environment("compensation needs a diffusion backend")),
            (_, false) => None,
        };
        let coarse = CoarseSource::Live {
            encoder: encoder.clone(),
            text,
        };
        Ok((Pipeline::new(cfg.clone(), cats, coarse, refine)?, text_ms))
    }
}
