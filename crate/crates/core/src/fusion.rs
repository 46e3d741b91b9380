//! Early-layer fusion.
//!
//! Attention maps captured from every block before the last are averaged
//! into one map. Each early layer's embeddings are then pushed through a
//! stripped-down copy of the last block (value path, averaged attention,
//! output projection, no residual and no MLP) and projected into the joint
//! image-text space.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::attention::{
    average_maps, self_self_map, AttentionStack, EmbeddingMatrix, Normalizer, SelfSelfMode,
    SquareMap, StackAxis,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub weight: Array1<f32>,
    pub bias: Array1<f32>,
    pub eps: f32,
}

impl LayerNormParams {
    pub fn identity(width: usize, eps: f32) -> Self {
        Self {
            weight: Array1::ones(width),
            bias: Array1::zeros(width),
            eps,
        }
    }

    pub fn width(&self) -> usize {
        self.weight.len()
    }

    pub fn apply(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.width() || self.bias.len() != self.width() {
            return Err(Error::shape(format!(
                "layer norm over {} channels applied to width {}",
                self.width(),
                x.ncols()
            )));
        }
        let mut out = x.to_owned();
        let n = x.ncols() as f32;
        for mut row in out.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
            let inv = 1.0 / (var + self.eps).sqrt();
            for ((v, w), b) in row.iter_mut().zip(&self.weight).zip(&self.bias) {
                *v = (*v - mean) * inv * w + b;
            }
        }
        Ok(out)
    }
}

/// `y = x Wᵀ + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f32>,
    pub bias: Option<Array1<f32>>,
}

impl Linear {
    pub fn new(weight: Array2<f32>, bias: Option<Array1<f32>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(Error::shape(format!(
                    "bias of length {} for a {}-output projection",
                    b.len(),
                    weight.nrows()
                )));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(width: usize) -> Self {
        Self {
            weight: Array2::eye(width),
            bias: Some(Array1::zeros(width)),
        }
    }

    pub fn in_width(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weight.nrows()
    }

    /// The product `x Wᵀ` without the bias.
    pub fn apply_weight(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        if x.ncols() != self.in_width() {
            return Err(Error::shape(format!(
                "projection expects width {}, got {}",
                self.in_width(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight.t()))
    }

    pub fn add_bias(&self, mut y: Array2<f32>) -> Array2<f32> {
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn apply(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        Ok(self.add_bias(self.apply_weight(x)?))
    }
}

/// Map from encoder width into the space shared with text embeddings:
/// optional final norm followed by a bias-free projection.
#[derive(Debug, Clone, PartialEq)]
pub struct JointProjection {
    pub post_norm: Option<LayerNormParams>,
    pub projection: Linear,
}

impl JointProjection {
    pub fn apply(&self, x: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        match &self.post_norm {
            Some(ln) => self.projection.apply(ln.apply(x)?.view()),
            None => self.projection.apply(x),
        }
    }

    pub fn out_width(&self) -> usize {
        self.projection.out_width()
    }
}

/// Parameters of the encoder's last block that the modified block reuses.
#[derive(Debug, Clone, PartialEq)]
pub struct LastBlockWeights {
    pub pre_norm: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub joint: JointProjection,
}

impl LastBlockWeights {
    pub fn width(&self) -> usize {
        self.pre_norm.width()
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::shape(format!("width {d} not divisible into {} heads", self.heads)));
        }
        for (name, lin) in [("query", &self.query), ("key", &self.key), ("value", &self.value), ("out", &self.out)] {
            if lin.in_width() != d || lin.out_width() != d {
                return Err(Error::shape(format!(
                    "{name} projection is {}x{}, expected {d}x{d}",
                    lin.out_width(),
                    lin.in_width()
                )));
            }
        }
        if let Some(ln) = &self.joint.post_norm {
            if ln.width() != d {
                return Err(Error::shape("joint-space norm width differs from encoder width"));
            }
        }
        if self.joint.projection.in_width() != d {
            return Err(Error::shape("joint projection input width differs from encoder width"));
        }
        Ok(())
    }

    /// Per-head query, key and value matrices of `LN(x)`.
    pub fn head_projections(&self, x: &EmbeddingMatrix) -> Result<Vec<[EmbeddingMatrix; 3]>> {
        let normed = self.pre_norm.apply(x.view())?;
        let q = self.query.apply(normed.view())?;
        let k = self.key.apply(normed.view())?;
        let v = self.value.apply(normed.view())?;
        let hd = self.head_dim();
        (0..self.heads)
            .map(|h| {
                let cols = s![.., h * hd..(h + 1) * hd];
                Ok([
                    EmbeddingMatrix::new(q.slice(cols).to_owned())?,
                    EmbeddingMatrix::new(k.slice(cols).to_owned())?,
                    EmbeddingMatrix::new(v.slice(cols).to_owned())?,
                ])
            })
            .collect()
    }
}

/// Attention captured at one layer: either already averaged over heads or
/// kept per head.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerAttention {
    Averaged(SquareMap),
    PerHead(AttentionStack),
}

impl LayerAttention {
    pub fn tokens(&self) -> Option<usize> {
        match self {
            LayerAttention::Averaged(m) => Some(m.tokens()),
            LayerAttention::PerHead(s) => s.tokens(),
        }
    }

    /// The single map this layer contributes to the layer average.
    pub fn averaged(&self) -> Result<SquareMap> {
        match self {
            LayerAttention::Averaged(m) => Ok(m.clone()),
            LayerAttention::PerHead(s) => average_maps(s, Normalizer::Count),
        }
    }
}

/// Embeddings and attention captured after block `layer_index` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer_index: usize,
    pub embeddings: EmbeddingMatrix,
    pub attention: LayerAttention,
}

impl LayerTrace {
    pub fn new(layer_index: usize, embeddings: EmbeddingMatrix, attention: LayerAttention) -> Result<Self> {
        if attention.tokens() != Some(embeddings.tokens()) {
            return Err(Error::shape(format!(
                "layer {layer_index}: {} embedding rows but attention over {:?} tokens",
                embeddings.tokens(),
                attention.tokens()
            )));
        }
        Ok(Self {
            layer_index,
            embeddings,
            attention,
        })
    }
}

/// Everything the fusion stage needs from one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    /// Patch grid as (rows, cols).
    pub grid: (usize, usize),
    /// Total number of transformer blocks in the encoder.
    pub depth: usize,
    /// Traces of blocks `1..depth`, in order.
    pub layers: Vec<LayerTrace>,
}

impl EncoderTrace {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if self.depth < 2 {
            return Err(Error::validation("encoder needs at least two blocks"));
        }
        if self.layers.len() != self.depth - 1 {
            return Err(Error::validation(format!(
                "expected {} early-layer traces, got {}",
                self.depth - 1,
                self.layers.len()
            )));
        }
        for (i, t) in self.layers.iter().enumerate() {
            if t.layer_index != i + 1 {
                return Err(Error::validation(format!(
                    "trace {i} carries layer index {}, expected {}",
                    t.layer_index,
                    i + 1
                )));
            }
            if t.embeddings.tokens() != h * w + 1 {
                return Err(Error::shape(format!(
                    "layer {}: {} tokens for a {h}x{w} grid plus class token",
                    t.layer_index,
                    t.embeddings.tokens()
                )));
            }
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&LayerTrace> {
        self.layers.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    #[default]
    Mean,
    PerHeadPassthrough,
}

impl FromStr for HeadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(HeadPolicy::Mean),
            "per_head_passthrough" => Ok(HeadPolicy::PerHeadPassthrough),
            other => Err(Error::config(format!("unknown head policy `{other}`"))),
        }
    }
}

pub fn head_collapse(per_head: AttentionStack, policy: HeadPolicy) -> Result<LayerAttention> {
    if per_head.axis() != StackAxis::Heads {
        return Err(Error::validation("head collapse expects a per-head stack"));
    }
    match policy {
        HeadPolicy::Mean => Ok(LayerAttention::Averaged(average_maps(&per_head, Normalizer::Count)?)),
        HeadPolicy::PerHeadPassthrough => {
            if per_head.is_empty() {
                return Err(Error::validation("per-head stack is empty"));
            }
            Ok(LayerAttention::PerHead(per_head))
        }
    }
}

/// Which attention map the modified last block uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    #[default]
    EarlyLayerAvg,
    QueryQuery,
    KeyKey,
    ValueValue,
    Identity,
    Original,
}

impl AttentionSource {
    pub const ALL: [AttentionSource; 6] = [
        AttentionSource::EarlyLayerAvg,
        AttentionSource::QueryQuery,
        AttentionSource::KeyKey,
        AttentionSource::ValueValue,
        AttentionSource::Identity,
        AttentionSource::Original,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionSource::EarlyLayerAvg => "early_layer_avg",
            AttentionSource::QueryQuery => "query_query",
            AttentionSource::KeyKey => "key_key",
            AttentionSource::ValueValue => "value_value",
            AttentionSource::Identity => "identity",
            AttentionSource::Original => "original",
        }
    }

    fn self_self(self) -> Option<SelfSelfMode> {
        match self {
            AttentionSource::EarlyLayerAvg => None,
            AttentionSource::QueryQuery => Some(SelfSelfMode::QueryQuery),
            AttentionSource::KeyKey => Some(SelfSelfMode::KeyKey),
            AttentionSource::ValueValue => Some(SelfSelfMode::ValueValue),
            AttentionSource::Identity => Some(SelfSelfMode::Identity),
            AttentionSource::Original => Some(SelfSelfMode::Original),
        }
    }
}

impl fmt::Display for AttentionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attention source `{s}`")))
    }
}

/// Early layers whose embeddings go through the modified last block.
///
/// Written as `all`, `last`, or a comma-separated list of 1-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LayerSelection {
    #[default]
    All,
    Last,
    Layers(Vec<usize>),
}

impl LayerSelection {
    /// Resolves to concrete indices for an encoder of the given depth.
    pub fn resolve(&self, depth: usize) -> Result<Vec<usize>> {
        let early = depth.saturating_sub(1);
        if early == 0 {
            return Err(Error::validation("encoder has no early layers"));
        }
        match self {
            LayerSelection::All => Ok((1..=early).collect()),
            LayerSelection::Last => Ok(vec![early]),
            LayerSelection::Layers(v) => {
                if v.is_empty() {
                    return Err(Error::config("layer set is empty"));
                }
                if let Some(&bad) = v.iter().find(|&&i| i == 0 || i > early) {
                    return Err(Error::config(format!(
                        "layer {bad} outside the early layers 1..={early}"
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

impl FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(LayerSelection::All),
            "last" => Ok(LayerSelection::Last),
            list => {
                let mut v = Vec::new();
                for part in list.split(',') {
                    let i: usize = part.trim().parse().map_err(|_| {
                        Error::config(format!("invalid layer set `{s}`"))
                    })?;
                    if v.contains(&i) {
                        return Err(Error::config(format!("layer {i} listed twice")));
                    }
                    v.push(i);
                }
                if v.is_empty() {
                    return Err(Error::config("layer set is empty"));
                }
                Ok(LayerSelection::Layers(v))
            }
        }
    }
}

impl TryFrom<String> for LayerSelection {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LayerSelection> for String {
    fn from(l: LayerSelection) -> String {
        match l {
            LayerSelection::All => "all".into(),
            LayerSelection::Last => "last".into(),
            LayerSelection::Layers(v) => v.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub layer_set: LayerSelection,
    pub attention_source: AttentionSource,
    pub normalizer: Normalizer,
}

/// Joint-space patch embeddings, one matrix of `h*w` rows per fused layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedOutputs {
    pub grid: (usize, usize),
    pub layers: Vec<usize>,
    pub embeddings: Vec<Array2<f32>>,
}

impl FusedOutputs {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.first().map_or(0, |e| e.ncols())
    }
}

/// Attention applied inside the modified block: one map shared by all heads,
/// or one map per head.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockAttention {
    Shared(SquareMap),
    PerHead(AttentionStack),
}

/// Averages the attention maps of every early layer.
pub fn build_avg_attention(traces: &[LayerTrace], normalizer: Normalizer) -> Result<SquareMap> {
    if traces.is_empty() {
        return Err(Error::validation("no early-layer traces to average"));
    }
    for (i, t) in traces.iter().enumerate() {
        if t.layer_index != i + 1 {
            return Err(Error::validation(format!(
                "early-layer traces must cover layers 1..={} in order; position {i} holds layer {}",
                traces.len(),
                t.layer_index
            )));
        }
    }
    let maps = traces
        .iter()
        .map(|t| t.attention.averaged())
        .collect::<Result<Vec<_>>>()?;
    average_maps(&AttentionStack::new(maps, StackAxis::Layers)?, normalizer)
}

/// `(A × V) W_outᵀ` for `V = value(LN(x))`, i.e. the block output before the
/// output-projection bias.
pub fn attention_value_product(
    x: &EmbeddingMatrix,
    attention: &BlockAttention,
    w: &LastBlockWeights,
) -> Result<Array2<f32>> {
    w.validate()?;
    let t = x.tokens();
    let normed = w.pre_norm.apply(x.view())?;
    let v = w.value.apply(normed.view())?;
    let mixed = match attention {
        BlockAttention::Shared(a) => {
            if a.tokens() != t {
                return Err(Error::shape(format!(
                    "attention over {} tokens applied to {t} embeddings",
                    a.tokens()
                )));
            }
            a.data().dot(&v)
        }
        BlockAttention::PerHead(stack) => {
            if stack.len() != w.heads || stack.tokens() != Some(t) {
                return Err(Error::shape(format!(
                    "per-head attention has {} maps over {:?} tokens; block has {} heads over {t} tokens",
                    stack.len(),
                    stack.tokens(),
                    w.heads
                )));
            }
            let hd = w.head_dim();
            let mut out = Array2::zeros(v.raw_dim());
            for (h, a) in stack.maps().iter().enumerate() {
                let cols = s![.., h * hd..(h + 1) * hd];
                out.slice_mut(cols).assign(&a.data().dot(&v.slice(cols)));
            }
            out
        }
    };
    w.out.apply_weight(mixed.view())
}

/// The last block with its attention replaced and residuals and MLP removed,
/// followed by the joint-space projection. Returns all `T` rows, class token
/// included.
pub fn modified_last_block(
    x: &EmbeddingMatrix,
    attention: &BlockAttention,
    w: &LastBlockWeights,
) -> Result<Array2<f32>> {
    let pre_bias = attention_value_product(x, attention, w)?;
    let block_out = w.out.add_bias(pre_bias);
    w.joint.apply(block_out.view())
}

/// Attention map(s) selected by `source`. Self-self variants are computed per
/// head from the last block's projections of `last_input`.
pub fn select_attention(
    source: AttentionSource,
    traces: &[LayerTrace],
    last_input: &EmbeddingMatrix,
    w: &LastBlockWeights,
    normalizer: Normalizer,
) -> Result<BlockAttention> {
    match source.self_self() {
        None => Ok(BlockAttention::Shared(build_avg_attention(traces, normalizer)?)),
        Some(SelfSelfMode::Identity) => Ok(BlockAttention::Shared(SquareMap::identity(last_input.tokens()))),
        Some(mode) => {
            w.validate()?;
            let maps = w
                .head_projections(last_input)?
                .iter()
                .map(|[q, k, v]| self_self_map(mode, q, k, v, w.head_dim()))
                .collect::<Result<Vec<_>>>()?;
            Ok(BlockAttention::PerHead(AttentionStack::new(maps, StackAxis::Heads)?))
        }
    }
}

pub fn fuse(trace: &EncoderTrace, w: &LastBlockWeights, cfg: &FusionConfig) -> Result<FusedOutputs> {
    trace.validate()?;
    let layers = cfg.layer_set.resolve(trace.depth)?;
    let last_input = &trace.last().expect("validated non-empty").embeddings;
    let attention = select_attention(cfg.attention_source, &trace.layers, last_input, w, cfg.normalizer)?;
    let embeddings = layers
        .iter()
        .map(|&i| {
            let out = modified_last_block(&trace.layers[i - 1].embeddings, &attention, w)?;
            let patches = out.slice(s![1.., ..]).to_owned();
            check_rows(&patches, i)?;
            Ok(patches)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedOutputs {
        grid: trace.grid,
        layers,
        embeddings,
    })
}

fn check_rows(m: &Array2<f32>, layer: usize) -> Result<()> {
    for (r, row) in m.axis_iter(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || n <= 0.0 {
            return Err(Error::validation(format!(
                "fused output of layer {layer}, patch {r} has norm {n}"
            )));
        }
    }
    Ok(())
}
