//! Dataset evaluation and pseudo-mask generation.
//!
//! Samples run on a worker pool; each worker folds its own confusion matrix
//! and the partial matrices are summed at the end. Per-image results are
//! re-sorted by sample index, so the outcome does not depend on scheduling.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::dataset::{write_index_png, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{image_level_metrics, image_scores, ConfusionMatrix};
use crate::pipeline::Pipeline;
use crate::report::MetricsReport;
use crate::segment::{LabelMap, BACKGROUND, IGNORE};
use crate::timing::{median_times, StageTimes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// All categories are candidates; image-level metrics are reported.
    Full,
    /// Candidates are restricted to the classes present in each ground truth.
    PseudoMasks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub limit: Option<usize>,
    /// 0 uses the available parallelism.
    pub workers: usize,
    /// Where to write predicted label PNGs, one per sample id.
    pub predictions_dir: Option<PathBuf>,
    pub image_threshold: f32,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mode: EvalMode::Full,
            limit: None,
            workers: 0,
            predictions_dir: None,
            image_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub times: Vec<StageTimes>,
}

impl EvalOutcome {
    pub fn median_millis(&self) -> std::collections::BTreeMap<String, f64> {
        median_times(&self.times)
            .into_iter()
            .map(|(s, v)| (s.name().to_string(), v))
            .collect()
    }
}

struct SampleOut {
    index: usize,
    image_scores: Option<Vec<f32>>,
    present: Vec<bool>,
    times: StageTimes,
}

struct Partial {
    cm: ConfusionMatrix,
    samples: Vec<SampleOut>,
}

impl Partial {
    fn new(classes: usize) -> Self {
        Self {
            cm: ConfusionMatrix::new(classes),
            samples: Vec::new(),
        }
    }

    fn merge(mut self, other: Partial) -> Result<Partial> {
        self.cm.merge(&other.cm)?;
        self.samples.extend(other.samples);
        Ok(self)
    }
}

/// Foreground category indices present in a ground-truth map.
fn present_categories(gt: &LabelMap, includes_background: bool, n_fg: usize) -> Vec<usize> {
    gt.present_labels()
        .into_iter()
        .filter(|&l| !(includes_background && l == BACKGROUND))
        .map(|l| l as usize - usize::from(includes_background))
        .filter(|&k| k < n_fg)
        .collect()
}

fn process(pipeline: &Pipeline, dataset: &Dataset, index: usize, opts: &EvalOptions) -> Result<(SampleOut, ConfusionMatrix)> {
    let sample = dataset.load_sample(index)?;
    let cats = pipeline.categories();
    let bg = cats.includes_background;
    let n_fg = cats.len();
    let present = present_categories(&sample.ground_truth, bg, n_fg);
    let (labels, image_scores, times) = match opts.mode {
        EvalMode::Full => {
            let seg = pipeline.run(&sample.id, &sample.image, None)?;
            let s = image_scores(&seg.scores, pipeline.config().labels.temperature)?;
            (seg.labels, Some(s), seg.times)
        }
        EvalMode::PseudoMasks if present.is_empty() => {
            let fill = if bg { BACKGROUND } else { IGNORE };
            (LabelMap(sample.ground_truth.0.mapv(|_| fill)), None, StageTimes::default())
        }
        EvalMode::PseudoMasks => {
            let subset = cats.restrict(&present)?;
            let seg = pipeline.run(&sample.id, &sample.image, Some(&subset))?;
            (seg.labels, None, seg.times)
        }
    };
    if let Some(dir) = &opts.predictions_dir {
        let path = dir.join(format!("{}.png", sample.id));
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_index_png(&path, &labels)?;
    }
    let mut cm = ConfusionMatrix::new(cats.num_labels());
    cm.accumulate(&labels, &sample.ground_truth)?;
    let mut flags = vec![false; n_fg];
    for k in present {
        flags[k] = true;
    }
    Ok((
        SampleOut {
            index,
            image_scores,
            present: flags,
            times,
        },
        cm,
    ))
}

pub fn evaluate(pipeline: &Pipeline, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalOutcome> {
    let n = opts.limit.map_or(dataset.len(), |l| l.min(dataset.len()));
    if n == 0 {
        return Err(Error::validation("no samples to evaluate"));
    }
    let classes = pipeline.categories().num_labels();
    if classes != dataset.spec.id.num_classes() {
        return Err(Error::config(format!(
            "category set has {classes} labels but {} has {}",
            dataset.spec.id,
            dataset.spec.id.num_classes()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::environment(format!("cannot start worker pool: {e}")))?;
    let partial = pool.install(|| {
        (0..n)
            .into_par_iter()
            .map(|i| process(pipeline, dataset, i, opts))
            .try_fold(
                || Partial::new(classes),
                |mut acc, r| {
                    let (out, cm) = r?;
                    acc.cm.merge(&cm)?;
                    acc.samples.push(out);
                    Ok(acc)
                },
            )
            .try_reduce(|| Partial::new(classes), Partial::merge)
    })?;
    let Partial { cm, mut samples } = partial;
    samples.sort_by_key(|s| s.index);
    let miou = cm.finalize();
    let image_level = match opts.mode {
        EvalMode::Full => {
            let scores: Vec<Vec<f32>> = samples.iter().map(|s| s.image_scores.clone().expect("full mode")).collect();
            let present: Vec<Vec<bool>> = samples.iter().map(|s| s.present.clone()).collect();
            Some(image_level_metrics(&scores, &present, opts.image_threshold)?)
        }
        EvalMode::PseudoMasks => None,
    };
    let report = MetricsReport {
        dataset: dataset.spec.id.name().to_string(),
        split: dataset.spec.split.clone(),
        samples: n,
        class_names: pipeline.categories().label_names(),
        per_class_iou: miou.per_class_iou,
        mean_iou: miou.mean_iou,
        pixel_accuracy: miou.pixel_accuracy,
        image_level,
    };
    Ok(EvalOutcome {
        report,
        confusion: cm,
        times: samples.into_iter().map(|s| s.times).collect(),
    })
}
