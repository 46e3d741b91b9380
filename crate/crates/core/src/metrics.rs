//! Segmentation and image-level classification metrics.

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::{LabelMap, ScoreMap, IGNORE};

/// `C x C` pixel counts, rows indexed by ground truth and columns by
/// prediction. Pixels whose ground truth is [`IGNORE`] are never counted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    /// IoU per class; `None` when the class appears in neither prediction nor
    /// ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU.
    pub mean_iou: f64,
    pub pixel_accuracy: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::shape(format!(
                "prediction {:?} and ground truth {:?} differ in size",
                pred.dim(),
                gt.dim()
            )));
        }
        let c = self.classes;
        for (&p, &g) in pred.0.iter().zip(gt.0.iter()) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= c {
                return Err(Error::validation(format!("ground-truth label {g} outside {c} classes")));
            }
            if p >= c {
                return Err(Error::validation(format!("predicted label {p} outside {c} classes")));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("cannot merge confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn finalize(&self) -> MiouReport {
        let c = self.classes;
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let gt: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let pred: u64 = (0..c).map(|i| self.get(i, k)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let mean_iou = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let total = self.total();
        let correct: u64 = (0..c).map(|k| self.get(k, k)).sum();
        MiouReport {
            per_class_iou,
            mean_iou,
            pixel_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        }
    }
}

/// Per-image class scores: spatial maximum of the per-pixel softmax over
/// foreground columns, indexed by foreground category.
pub fn image_scores(map: &ScoreMap, temperature: f32) -> Result<Vec<f32>> {
    if temperature <= 0.0 {
        return Err(Error::config("softmax temperature must be positive"));
    }
    let fg: Vec<usize> = (0..map.columns()).filter(|&k| Some(k) != map.background_column).collect();
    if fg.is_empty() {
        return Err(Error::validation("score map has no foreground columns"));
    }
    let (h, w, _) = map.scores.dim();
    let mut best = vec![0.0f32; fg.len()];
    for y in 0..h {
        for x in 0..w {
            let v = map.scores.slice(s![y, x, ..]);
            let top = fg.iter().map(|&k| v[k]).fold(f32::NEG_INFINITY, f32::max);
            let denom: f32 = fg.iter().map(|&k| ((v[k] - top) / temperature).exp()).sum();
            for (b, &k) in best.iter_mut().zip(&fg) {
                *b = b.max(((v[k] - top) / temperature).exp() / denom);
            }
        }
    }
    // reorder by label value so index i is foreground category i
    let offset = usize::from(map.includes_background);
    let mut out = vec![0.0f32; fg.len()];
    for (b, &k) in best.iter().zip(&fg) {
        let idx = map.column_labels[k] as usize - offset;
        if idx >= out.len() {
            return Err(Error::validation("score columns do not cover a contiguous label range"));
        }
        out[idx] = *b;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mean_ap: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// AP per class; `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
}

/// Average precision with all-point interpolation: the area under the
/// precision envelope of the ranked list. `None` if there are no positives.
pub fn average_precision(scores: &[f32], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1;
        }
        recall.push(tp as f64 / n_pos as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Some(
        (1..recall.len())
            .map(|i| (recall[i] - recall[i - 1]) * precision[i])
            .sum(),
    )
}

/// mAP over classes with positives, plus macro precision and recall at
/// `threshold` (score >= threshold counts as predicted) and their harmonic
/// mean.
pub fn image_level_metrics(scores: &[Vec<f32>], present: &[Vec<bool>], threshold: f32) -> Result<ImageMetrics> {
    if scores.is_empty() {
        return Err(Error::validation("no images to score"));
    }
    if scores.len() != present.len() {
        return Err(Error::shape("score and label lists differ in length"));
    }
    let c = scores[0].len();
    if scores.iter().any(|s| s.len() != c) || present.iter().any(|p| p.len() != c) {
        return Err(Error::shape("inconsistent class counts across images"));
    }
    let mut per_class_ap = Vec::with_capacity(c);
    let (mut p_sum, mut r_sum, mut counted) = (0.0, 0.0, 0usize);
    for k in 0..c {
        let col: Vec<f32> = scores.iter().map(|s| s[k]).collect();
        let pos: Vec<bool> = present.iter().map(|p| p[k]).collect();
        per_class_ap.push(average_precision(&col, &pos));
        if pos.iter().any(|&p| p) {
            let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
            for (&s, &p) in col.iter().zip(&pos) {
                match (s >= threshold, p) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fneg += 1,
                    (false, false) => {}
                }
            }
            p_sum += if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            r_sum += tp as f64 / (tp + fneg) as f64;
            counted += 1;
        }
    }
    let aps: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let mean = |s: f64| if counted == 0 { 0.0 } else { s / counted as f64 };
    let (precision, recall) = (mean(p_sum), mean(r_sum));
    Ok(ImageMetrics {
        mean_ap: if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 },
        f1: if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) },
        precision,
        recall,
        per_class_ap,
    })
}
