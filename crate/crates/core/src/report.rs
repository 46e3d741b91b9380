//! Metric reports and run manifests.
//!
//! `metrics.json` and `metrics.txt` hold only values derived from the
//! predictions, so identical inputs give byte-identical files. Timings,
//! checksums and the resolved configuration live in `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::metrics::ImageMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub split: String,
    pub samples: usize,
    pub class_names: Vec<String>,
    /// IoU per label value, `None` where a class is absent from both
    /// prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_level: Option<ImageMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    /// `key = value` lines; percentages with two decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        writeln!(s, "dataset = {}", self.dataset).unwrap();
        writeln!(s, "split = {}", self.split).unwrap();
        writeln!(s, "samples = {}", self.samples).unwrap();
        writeln!(s, "miou = {}", pct(self.mean_iou)).unwrap();
        writeln!(s, "pixel_accuracy = {}", pct(self.pixel_accuracy)).unwrap();
        if let Some(m) = &self.image_level {
            writeln!(s, "map = {}", pct(m.mean_ap)).unwrap();
            writeln!(s, "f1 = {}", pct(m.f1)).unwrap();
            writeln!(s, "precision = {}", pct(m.precision)).unwrap();
            writeln!(s, "recall = {}", pct(m.recall)).unwrap();
        }
        for (name, iou) in self.class_names.iter().zip(&self.per_class_iou) {
            let v = iou.map(pct).unwrap_or_else(|| "nan".into());
            writeln!(s, "iou.{name} = {v}").unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.json"), self.to_json().as_bytes())?;
        write_atomic(&dir.join("metrics.txt"), self.to_text().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    pub config: PipelineConfig,
    /// SHA-256 of each weight file, keyed by path relative to the weights root.
    pub weight_checksums: BTreeMap<String, String>,
    /// Median milliseconds per stage.
    pub timings_ms: BTreeMap<String, f64>,
    pub metrics: Option<MetricsReport>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, config: PipelineConfig) -> Self {
        Self {
            command: command.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            config,
            weight_checksums: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
            metrics: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises") + "\n";
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::config(format!("invalid manifest {}: {e}", path.display())))
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp: PathBuf = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
