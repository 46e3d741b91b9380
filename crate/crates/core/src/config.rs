//! Pipeline configuration.
//!
//! One TOML document with flat dotted keys (`fusion.attention_source =
//! "identity"`; ordinary tables work too). Values resolve as defaults, then
//! the file, then `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compensation::CompensationConfig;
use crate::dataset::{DatasetId, DatasetSpec};
use crate::diffusion::ExtractionConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::segment::{LabelParams, TemplateSet};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<DatasetId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    /// Threshold on max-pooled class probabilities for precision/recall.
    pub image_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            workers: 0,
            limit: None,
            image_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub backbone: String,
    pub input_short_side: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Directory of recorded fixtures used instead of live model calls.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay: Option<PathBuf>,
    pub templates: TemplateSet,
    pub fusion: FusionConfig,
    pub labels: LabelParams,
    pub extraction: ExtractionConfig,
    pub compensation: CompensationConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            backbone: "vit_b_16".into(),
            input_short_side: 336,
            seed: 0,
            output_dir: PathBuf::from("out"),
            replay: None,
            templates: TemplateSet::default(),
            fusion: FusionConfig::default(),
            labels: LabelParams::default(),
            extraction: ExtractionConfig::default(),
            compensation: CompensationConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("invalid configuration: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Applies one `dotted.key=value` override. The value is read as a TOML
    /// literal and falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::config(format!("invalid key `{key}`")));
        }
        let mut root = toml::Table::try_from(&*self).expect("configuration serialises");
        let mut table = &mut root;
        for part in &path[..path.len() - 1] {
            table = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("`{part}` in `{key}` is not a table")))?;
        }
        table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
        *self = root
            .try_into()
            .map_err(|e| Error::config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    /// Defaults, then the optional file, then overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        for o in overrides {
            cfg.set(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone.trim().is_empty() {
            return Err(Error::config("backbone is empty"));
        }
        if self.input_short_side == 0 {
            return Err(Error::config("input_short_side must be positive"));
        }
        if self.labels.temperature.is_nan() || self.labels.temperature <= 0.0 {
            return Err(Error::config("labels.temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.labels.threshold) {
            return Err(Error::config("labels.threshold must lie in [0, 1]"));
        }
        if !self.eval.image_threshold.is_finite() {
            return Err(Error::config("eval.image_threshold must be finite"));
        }
        self.extraction.validate().map_err(|e| Error::config(e.to_string()))?;
        if let Some(r) = &self.replay {
            if !r.is_dir() {
                return Err(Error::config(format!("replay directory {} does not exist", r.display())));
            }
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let id = self
            .dataset
            .id
            .ok_or_else(|| Error::config("dataset.id is not set"))?;
        let root = self
            .dataset
            .root
            .clone()
            .ok_or_else(|| Error::config("dataset.root is not set"))?;
        Ok(DatasetSpec::new(id, root, self.dataset.split.as_deref()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::Normalizer;
    use crate::compensation::HeadFusion;
    use crate::fusion::{AttentionSource, LayerSelection};

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(PipelineConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn flat_dotted_keys_and_tables_agree() {
        let flat = PipelineConfig::from_toml(
            "fusion.attention_source = \"identity\"\nfusion.layer_set = \"1,3\"\ncompensation.head_fusion = \"mean\"\n",
        )
        .unwrap();
        let nested =
            PipelineConfig::from_toml("[fusion]\nattention_source = \"identity\"\nlayer_set = \"1,3\"\n[compensation]\nhead_fusion = \"mean\"\n")
                .unwrap();
        assert_eq!(flat, nested);
        assert_eq!(flat.fusion.attention_source, AttentionSource::Identity);
        assert_eq!(flat.fusion.layer_set, LayerSelection::Layers(vec![1, 3]));
        assert_eq!(flat.compensation.head_fusion, HeadFusion::Mean);
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 3\nfusion.normalizer = \"depth\"\nbackbone = \"vit_l_14\"\n").unwrap();
        let cfg = PipelineConfig::resolve(
            Some(&path),
            &["seed=9".into(), "compensation.enabled=false".into(), "dataset.root=/data/voc".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.backbone, "vit_l_14");
        assert_eq!(cfg.fusion.normalizer, Normalizer::Depth);
        assert!(!cfg.compensation.enabled);
        assert_eq!(cfg.dataset.root.as_deref(), Some(Path::new("/data/voc")));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let mut cfg = PipelineConfig::default();
        for bad in ["nope=1", "fusion.nope=1", "fusion.normalizer=median", "seed", "labels.temperature=0"] {
            let r = cfg.set(bad).and_then(|_| cfg.validate());
            assert_eq!(r.unwrap_err().exit_code(), 2, "{bad}");
            cfg = PipelineConfig::default();
        }
        assert_eq!(PipelineConfig::from_toml("seed = \"x\"").unwrap_err().exit_code(), 2);
        assert!(cfg.dataset_spec().is_err());
    }
}
