//! Category prompts, patch-text similarity and label assignment.

use std::collections::HashSet;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::backend::TextEncoder;
use crate::error::{Error, Result};
use crate::fusion::FusedOutputs;

/// Label value for pixels that are excluded from evaluation.
pub const IGNORE: u16 = u16::MAX;

/// Label value reserved for background when a category set has one.
pub const BACKGROUND: u16 = 0;

const IMAGENET_TEMPLATES: &str = include_str!("../assets/templates/imagenet80.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    /// The 80 ImageNet prompt templates released with CLIP.
    #[default]
    Imagenet80,
    /// Just `a photo of a {}.`
    Single,
}

impl TemplateSet {
    pub fn templates(self) -> Vec<&'static str> {
        match self {
            TemplateSet::Imagenet80 => IMAGENET_TEMPLATES.lines().filter(|l| !l.is_empty()).collect(),
            TemplateSet::Single => vec!["a photo of a {}."],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TemplateSet::Imagenet80 => "imagenet80",
            TemplateSet::Single => "single",
        }
    }
}

impl FromStr for TemplateSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imagenet80" => Ok(TemplateSet::Imagenet80),
            "single" => Ok(TemplateSet::Single),
            other => Err(Error::config(format!("unknown template set `{other}`"))),
        }
    }
}

/// One category and its synonyms; the first name is the display name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryGroup {
    pub names: Vec<String>,
}

impl CategoryGroup {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(|n| n.into().trim().to_string()).collect();
        if names.is_empty() || names.iter().any(String::is_empty) {
            return Err(Error::validation("empty category name"));
        }
        Ok(Self { names })
    }

    pub fn display(&self) -> &str {
        &self.names[0]
    }
}

/// Ordered foreground categories plus an optional background group.
#[derive(Debug, Clone, PartialEq)]
pub struct CategorySet {
    pub groups: Vec<CategoryGroup>,
    /// Names scored as background by the background-prompt strategy.
    pub background: Option<CategoryGroup>,
    pub includes_background: bool,
    pub templates: TemplateSet,
}

impl CategorySet {
    pub fn new(
        groups: Vec<CategoryGroup>,
        background: Option<CategoryGroup>,
        includes_background: bool,
        templates: TemplateSet,
    ) -> Result<Self> {
        let set = Self {
            groups,
            background,
            includes_background,
            templates,
        };
        set.validate()?;
        Ok(set)
    }

    /// Foreground categories given by plain names, no synonyms.
    pub fn from_names<S: AsRef<str>>(names: &[S], includes_background: bool, templates: TemplateSet) -> Result<Self> {
        let groups = names
            .iter()
            .map(|n| CategoryGroup::new([n.as_ref()]))
            .collect::<Result<Vec<_>>>()?;
        Self::new(groups, None, includes_background, templates)
    }

    /// Parses the class-list text format: one category per line, synonyms
    /// separated by commas, the background group marked with a leading `!`.
    /// Blank lines and lines starting with `#` are skipped.
    pub fn parse(text: &str, includes_background: bool, templates: TemplateSet) -> Result<Self> {
        let mut groups = Vec::new();
        let mut background = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('!') {
                if background.is_some() {
                    return Err(Error::validation("class list has more than one background line"));
                }
                background = Some(CategoryGroup::new(rest.split(','))?);
            } else {
                groups.push(CategoryGroup::new(line.split(','))?);
            }
        }
        Self::new(groups, background, includes_background, templates)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::validation("category set is empty"));
        }
        let mut seen = HashSet::new();
        for g in &self.groups {
            for n in &g.names {
                if !seen.insert(n.to_lowercase()) {
                    return Err(Error::validation(format!("duplicate category name `{n}`")));
                }
            }
        }
        if self.background.is_some() && !self.includes_background {
            return Err(Error::validation("background names given for a set without background"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Label value assigned to foreground category `k`.
    pub fn label_of(&self, k: usize) -> u16 {
        (if self.includes_background { k + 1 } else { k }) as u16
    }

    /// Number of distinct label values, background included.
    pub fn num_labels(&self) -> usize {
        self.groups.len() + usize::from(self.includes_background)
    }

    /// Display names indexed by label value.
    pub fn label_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_labels());
        if self.includes_background {
            names.push("background".to_string());
        }
        names.extend(self.groups.iter().map(|g| g.display().to_string()));
        names
    }

    /// Keeps only the listed foreground categories (by index), preserving
    /// their label values.
    pub fn restrict(&self, keep: &[usize]) -> Result<Subset> {
        if let Some(&bad) = keep.iter().find(|&&k| k >= self.groups.len()) {
            return Err(Error::validation(format!("category index {bad} out of range")));
        }
        Ok(Subset {
            categories: keep.to_vec(),
        })
    }
}

/// A selection of foreground category indices of a [`CategorySet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subset {
    pub categories: Vec<usize>,
}

/// Unit-norm text embeddings. Each row belongs to one score column; a column
/// with several rows (synonyms) takes the maximum over them.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddings {
    pub rows: Array2<f32>,
    pub row_column: Vec<usize>,
    /// Label value of each score column.
    pub column_labels: Vec<u16>,
    pub background_column: Option<usize>,
    pub includes_background: bool,
}

impl TextEmbeddings {
    pub fn columns(&self) -> usize {
        self.column_labels.len()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }

    /// Columns for a subset of foreground categories, background column kept.
    pub fn restrict(&self, set: &CategorySet, subset: &Subset) -> Result<TextEmbeddings> {
        let mut keep_cols: Vec<usize> = Vec::new();
        if let Some(b) = self.background_column {
            keep_cols.push(b);
        }
        for &k in &subset.categories {
            let label = set.label_of(k);
            let col = self
                .column_labels
                .iter()
                .position(|&l| l == label)
                .ok_or_else(|| Error::validation(format!("category {k} has no text embedding")))?;
            if !keep_cols.contains(&col) {
                keep_cols.push(col);
            }
        }
        let mut rows = Vec::new();
        let mut row_column = Vec::new();
        for (new_col, &old_col) in keep_cols.iter().enumerate() {
            for (r, &c) in self.row_column.iter().enumerate() {
                if c == old_col {
                    rows.push(r);
                    row_column.push(new_col);
                }
            }
        }
        Ok(TextEmbeddings {
            rows: self.rows.select(Axis(0), &rows),
            row_column,
            column_labels: keep_cols.iter().map(|&c| self.column_labels[c]).collect(),
            background_column: self.background_column.map(|_| 0),
            includes_background: self.includes_background,
        })
    }
}

pub(crate) fn normalize_rows(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
}

/// Template-ensembled unit embedding of one name.
pub fn embed_name(name: &str, templates: &[&str], encoder: &dyn TextEncoder) -> Result<Vec<f32>> {
    if name.trim().is_empty() {
        return Err(Error::validation("empty category name"));
    }
    if templates.is_empty() {
        return Err(Error::config("template set is empty"));
    }
    let prompts: Vec<String> = templates.iter().map(|t| t.replace("{}", name)).collect();
    let mut per_template = encoder.embed(&prompts)?;
    if per_template.nrows() != prompts.len() || per_template.ncols() != encoder.joint_width() {
        return Err(Error::shape(format!(
            "text encoder returned {:?} for {} prompts",
            per_template.dim(),
            prompts.len()
        )));
    }
    normalize_rows(&mut per_template);
    let mut mean = per_template.mean_axis(Axis(0)).expect("at least one template");
    let n = mean.dot(&mean).sqrt();
    if !n.is_finite() || n == 0.0 {
        return Err(Error::validation(format!("text embedding of `{name}` has norm {n}")));
    }
    mean.mapv_inplace(|v| v / n);
    Ok(mean.to_vec())
}

pub fn embed_categories(set: &CategorySet, encoder: &dyn TextEncoder) -> Result<TextEmbeddings> {
    set.validate()?;
    let mut columns: Vec<(&CategoryGroup, u16)> = Vec::new();
    let background_column = set.background.as_ref().map(|bg| {
        columns.push((bg, BACKGROUND));
        0
    });
    for (k, g) in set.groups.iter().enumerate() {
        columns.push((g, set.label_of(k)));
    }
    let width = encoder.joint_width();
    let templates = set.templates.templates();
    let mut flat = Vec::new();
    let mut row_column = Vec::new();
    for (c, (group, _)) in columns.iter().enumerate() {
        for name in &group.names {
            flat.extend(embed_name(name, &templates, encoder)?);
            row_column.push(c);
        }
    }
    let rows = Array2::from_shape_vec((row_column.len(), width), flat).expect("row width checked");
    Ok(TextEmbeddings {
        rows,
        row_column,
        column_labels: columns.iter().map(|&(_, l)| l).collect(),
        background_column,
        includes_background: set.includes_background,
    })
}

/// Per-location category scores over an `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// `H x W x C`.
    pub scores: Array3<f32>,
    pub column_labels: Vec<u16>,
    pub background_column: Option<usize>,
    pub includes_background: bool,
}

impl ScoreMap {
    pub fn new(
        scores: Array3<f32>,
        column_labels: Vec<u16>,
        background_column: Option<usize>,
        includes_background: bool,
    ) -> Result<Self> {
        if scores.dim().2 != column_labels.len() {
            return Err(Error::shape(format!(
                "{} score channels for {} columns",
                scores.dim().2,
                column_labels.len()
            )));
        }
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("score map contains non-finite values"));
        }
        Ok(Self {
            scores,
            column_labels,
            background_column,
            includes_background,
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        let (h, w, _) = self.scores.dim();
        (h, w)
    }

    pub fn columns(&self) -> usize {
        self.column_labels.len()
    }

    /// Same metadata, new values.
    pub fn with_scores(&self, scores: Array3<f32>) -> Result<Self> {
        Self::new(scores, self.column_labels.clone(), self.background_column, self.includes_background)
    }

    /// Row-major `HW x C` view of the scores.
    pub fn flattened(&self) -> Array2<f32> {
        let (h, w, c) = self.scores.dim();
        self.scores
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .expect("standard layout")
    }

    pub fn view(&self) -> ArrayView3<'_, f32> {
        self.scores.view()
    }
}

/// Cosine similarity between every patch and every text row, averaged over
/// fused layers; synonyms of one category are reduced by maximum.
pub fn similarity_scores(outputs: &FusedOutputs, text: &TextEmbeddings) -> Result<ScoreMap> {
    if outputs.is_empty() {
        return Err(Error::validation("no fused outputs"));
    }
    let (h, w) = outputs.grid;
    let mut sum = Array2::<f32>::zeros((h * w, text.rows.nrows()));
    for (layer, emb) in outputs.layers.iter().zip(&outputs.embeddings) {
        if emb.ncols() != text.width() {
            return Err(Error::shape(format!(
                "layer {layer} embeddings have width {}, text embeddings {}",
                emb.ncols(),
                text.width()
            )));
        }
        if emb.nrows() != h * w {
            return Err(Error::shape(format!(
                "layer {layer} has {} patches for a {h}x{w} grid",
                emb.nrows()
            )));
        }
        sum += &cosine_matrix(emb, &text.rows);
    }
    sum.mapv_inplace(|v| v / outputs.len() as f32);
    let per_column = reduce_columns(&sum, &text.row_column, text.columns());
    let scores = per_column.into_shape_with_order((h, w, text.columns())).expect("hw rows");
    ScoreMap::new(
        scores,
        text.column_labels.clone(),
        text.background_column,
        text.includes_background,
    )
}

/// `P̂ T̂ᵀ` with rows of both operands normalised, clamped to `[-1, 1]`.
pub fn cosine_matrix(patches: &Array2<f32>, text: &Array2<f32>) -> Array2<f32> {
    let mut p = patches.clone();
    normalize_rows(&mut p);
    let mut t = text.clone();
    normalize_rows(&mut t);
    let mut c = p.dot(&t.t());
    c.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    c
}

fn reduce_columns(m: &Array2<f32>, row_column: &[usize], columns: usize) -> Array2<f32> {
    let mut out = Array2::from_elem((m.nrows(), columns), f32::NEG_INFINITY);
    for (r, &c) in row_column.iter().enumerate() {
        let src = m.column(r);
        let mut dst = out.column_mut(c);
        dst.zip_mut_with(&src, |d, &s| *d = d.max(s));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundStrategy {
    /// Softmax over foreground scores with temperature; weak maxima become
    /// background.
    #[default]
    SoftmaxThreshold,
    /// Background names are scored like a category and win by argmax.
    BackgroundPrompt,
}

impl FromStr for BackgroundStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_threshold" => Ok(BackgroundStrategy::SoftmaxThreshold),
            "background_prompt" => Ok(BackgroundStrategy::BackgroundPrompt),
            other => Err(Error::config(format!("unknown background strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelParams {
    pub strategy: BackgroundStrategy,
    pub temperature: f32,
    pub threshold: f32,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self {
            strategy: BackgroundStrategy::SoftmaxThreshold,
            temperature: 0.01,
            threshold: 0.5,
        }
    }
}

/// Integer label per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap(pub Array2<u16>);

impl LabelMap {
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.0[[y, x]]
    }

    /// Distinct labels present, ignore excluded, ascending.
    pub fn present_labels(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.0.iter().copied().filter(|&v| v != IGNORE).collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

fn argmax(values: impl Iterator<Item = (usize, f32)>) -> Option<(usize, f32)> {
    values.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if bv >= v => best,
        _ => Some((i, v)),
    })
}

pub fn assign_labels(map: &ScoreMap, params: &LabelParams) -> Result<LabelMap> {
    assign_labels_within(map, params, None)
}

/// Like [`assign_labels`], but only labels in `allowed` (plus background)
/// can be chosen. Softmax probabilities are still taken over every
/// foreground column, so restricting the candidates does not inflate them.
pub fn assign_labels_within(map: &ScoreMap, params: &LabelParams, allowed: Option<&[u16]>) -> Result<LabelMap> {
    let (h, w, c) = map.scores.dim();
    if c == 0 {
        return Err(Error::validation("score map has no categories"));
    }
    if map.scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("score map contains non-finite values"));
    }
    let bg = map.background_column;
    let mode = if !map.includes_background {
        None
    } else {
        Some(params.strategy)
    };
    if mode == Some(BackgroundStrategy::BackgroundPrompt) && bg.is_none() {
        return Err(Error::config("background_prompt strategy needs background names in the class list"));
    }
    if mode == Some(BackgroundStrategy::SoftmaxThreshold) && params.temperature <= 0.0 {
        return Err(Error::config("softmax temperature must be positive"));
    }
    let candidate: Vec<bool> = (0..c)
        .map(|k| Some(k) == bg || allowed.is_none_or(|a| a.contains(&map.column_labels[k])))
        .collect();
    // without a background fallback an empty candidate set has no answer
    if mode.is_none() && !candidate.iter().any(|&b| b) {
        return Err(Error::validation("no candidate categories to label with"));
    }
    let mut out = Array2::<u16>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let scores = map.scores.slice(s![y, x, ..]);
            let label = match mode {
                None | Some(BackgroundStrategy::BackgroundPrompt) => {
                    let cand = scores.iter().copied().enumerate().filter(|&(k, _)| candidate[k]);
                    let (k, _) = argmax(cand).expect("a candidate exists");
                    map.column_labels[k]
                }
                Some(BackgroundStrategy::SoftmaxThreshold) => {
                    let fg = scores.iter().copied().enumerate().filter(|&(k, _)| Some(k) != bg);
                    let allowed_fg = fg.clone().filter(|&(k, _)| candidate[k]);
                    match (argmax(fg.clone()), argmax(allowed_fg)) {
                        (Some((_, top)), Some((k, best))) => {
                            let denom: f32 = fg.map(|(_, v)| ((v - top) / params.temperature).exp()).sum();
                            let p = ((best - top) / params.temperature).exp() / denom;
                            if p < params.threshold {
                                BACKGROUND
                            } else {
                                map.column_labels[k]
                            }
                        }
                        _ => BACKGROUND,
                    }
                }
            };
            out[[y, x]] = label;
        }
    }
    Ok(LabelMap(out))
}
