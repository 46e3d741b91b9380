//! Weight-free attention algebra.
//!
//! Everything here operates on dense `f32` matrices: scaled dot-product
//! attention maps, self-self variants of them, layer averaging, chaining of
//! per-head maps by matrix product, and propagation of per-location scores
//! through a (row-stochastic) attention map.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute row-sum tolerance used when a map is declared row-stochastic.
pub const STOCHASTIC_TOL: f32 = 1e-4;

/// A square `T x T` map over tokens.
///
/// The `stochastic` flag records that every row is non-negative and sums to
/// one. Constructors that set it either validate the property or produce it
/// by construction (softmax, identity, uniform, true means).
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMap {
    data: Array2<f32>,
    stochastic: bool,
}

impl SquareMap {
    /// Wraps an arbitrary square matrix without the stochastic flag.
    pub fn new(data: Array2<f32>) -> Result<Self> {
        let (r, c) = data.dim();
        if r != c {
            return Err(Error::shape(format!("attention map must be square, got {r}x{c}")));
        }
        if r == 0 {
            return Err(Error::validation("attention map has no tokens"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("attention map contains non-finite values"));
        }
        Ok(Self {
            data,
            stochastic: false,
        })
    }

    /// Wraps a matrix that must be row-stochastic within [`STOCHASTIC_TOL`].
    pub fn stochastic(data: Array2<f32>) -> Result<Self> {
        let mut map = Self::new(data)?;
        map.check_stochastic(STOCHASTIC_TOL)?;
        map.stochastic = true;
        Ok(map)
    }

    pub(crate) fn from_parts(data: Array2<f32>, stochastic: bool) -> Self {
        debug_assert_eq!(data.nrows(), data.ncols());
        Self { data, stochastic }
    }

    pub fn identity(tokens: usize) -> Self {
        Self::from_parts(Array2::eye(tokens), true)
    }

    pub fn uniform(tokens: usize) -> Self {
        Self::from_parts(Array2::from_elem((tokens, tokens), 1.0 / tokens as f32), true)
    }

    pub fn tokens(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f32> {
        self.data
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    /// Largest absolute deviation of a row sum from one.
    pub fn max_row_deviation(&self) -> f32 {
        self.data
            .rows()
            .into_iter()
            .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() as f32)
            .fold(0.0, f32::max)
    }

    pub fn check_stochastic(&self, tol: f32) -> Result<()> {
        if let Some(v) = self.data.iter().find(|&&v| v < 0.0) {
            return Err(Error::validation(format!(
                "attention map has a negative entry ({v})"
            )));
        }
        let dev = self.max_row_deviation();
        if dev > tol {
            return Err(Error::validation(format!(
                "attention map rows deviate from 1 by {dev:e} (tolerance {tol:e})"
            )));
        }
        Ok(())
    }

    /// Divides every row by its sum. Rows summing to zero are left untouched.
    pub fn renormalize_rows(mut self) -> Self {
        for mut row in self.data.rows_mut() {
            let s: f32 = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        self.stochastic = self.data.iter().all(|&v| v >= 0.0);
        self
    }
}

/// What the members of an [`AttentionStack`] are indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackAxis {
    Layers,
    Heads,
}

/// An ordered list of square maps sharing one token count.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    maps: Vec<SquareMap>,
    axis: StackAxis,
}

impl AttentionStack {
    pub fn new(maps: Vec<SquareMap>, axis: StackAxis) -> Result<Self> {
        if let Some(first) = maps.first() {
            let t = first.tokens();
            if let Some((i, m)) = maps.iter().enumerate().find(|(_, m)| m.tokens() != t) {
                return Err(Error::shape(format!(
                    "stack member {i} has {} tokens, expected {t}",
                    m.tokens()
                )));
            }
        }
        Ok(Self { maps, axis })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn tokens(&self) -> Option<usize> {
        self.maps.first().map(SquareMap::tokens)
    }

    pub fn axis(&self) -> StackAxis {
        self.axis
    }

    pub fn maps(&self) -> &[SquareMap] {
        &self.maps
    }

    pub fn into_maps(self) -> Vec<SquareMap> {
        self.maps
    }
}

/// A `T x D` matrix of token embeddings (or queries, keys, values).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Array2<f32>);

impl EmbeddingMatrix {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding matrix contains non-finite values"));
        }
        Ok(Self(data))
    }

    pub fn tokens(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f32> {
        self.0.view()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f32> {
        self.0
    }
}

/// `Softmax(Q Kᵀ / sqrt(d))`, row-wise.
pub fn softmax_attention(q: &EmbeddingMatrix, k: &EmbeddingMatrix, d: usize) -> Result<SquareMap> {
    if d == 0 {
        return Err(Error::validation("feature dimensionality must be positive"));
    }
    if q.width() != k.width() || q.width() != d {
        return Err(Error::shape(format!(
            "query width {}, key width {}, declared d {d}",
            q.width(),
            k.width()
        )));
    }
    if q.tokens() != k.tokens() {
        return Err(Error::shape(format!(
            "self-attention needs equal token counts, got {} and {}",
            q.tokens(),
            k.tokens()
        )));
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut logits = q.view().dot(&k.view().t());
    logits.mapv_inplace(|v| v * scale);
    softmax_rows_inplace(&mut logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("attention logits overflowed"));
    }
    Ok(SquareMap::from_parts(logits, true))
}

pub(crate) fn softmax_rows_inplace(m: &mut Array2<f32>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f32 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Replacement attention used at the final block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfSelfMode {
    QueryQuery,
    KeyKey,
    ValueValue,
    Identity,
    Original,
}

impl SelfSelfMode {
    pub const ALL: [SelfSelfMode; 5] = [
        SelfSelfMode::QueryQuery,
        SelfSelfMode::KeyKey,
        SelfSelfMode::ValueValue,
        SelfSelfMode::Identity,
        SelfSelfMode::Original,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelfSelfMode::QueryQuery => "query_query",
            SelfSelfMode::KeyKey => "key_key",
            SelfSelfMode::ValueValue => "value_value",
            SelfSelfMode::Identity => "identity",
            SelfSelfMode::Original => "original",
        }
    }
}

impl fmt::Display for SelfSelfMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelfSelfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown self-self attention mode `{s}`")))
    }
}

pub fn self_self_map(
    mode: SelfSelfMode,
    q: &EmbeddingMatrix,
    k: &EmbeddingMatrix,
    v: &EmbeddingMatrix,
    d: usize,
) -> Result<SquareMap> {
    if q.tokens() != k.tokens() || k.tokens() != v.tokens() {
        return Err(Error::shape("query, key and value token counts differ"));
    }
    if q.width() != k.width() || k.width() != v.width() {
        return Err(Error::shape("query, key and value widths differ"));
    }
    match mode {
        SelfSelfMode::Identity => {
            if q.tokens() == 0 {
                return Err(Error::validation("attention map has no tokens"));
            }
            Ok(SquareMap::identity(q.tokens()))
        }
        SelfSelfMode::QueryQuery => softmax_attention(q, q, d),
        SelfSelfMode::KeyKey => softmax_attention(k, k, d),
        SelfSelfMode::ValueValue => softmax_attention(v, v, d),
        SelfSelfMode::Original => softmax_attention(q, k, d),
    }
}

/// How the sum over layer maps is normalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Divide by the number of maps: a true mean, which stays row-stochastic.
    #[default]
    Count,
    /// Divide by the encoder depth, i.e. one more than the number of maps
    /// averaged. Rows then sum to `(N-1)/N`.
    Depth,
}

impl FromStr for Normalizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(Normalizer::Count),
            "depth" => Ok(Normalizer::Depth),
            other => Err(Error::config(format!("unknown normalizer `{other}`"))),
        }
    }
}

pub fn average_maps(stack: &AttentionStack, normalizer: Normalizer) -> Result<SquareMap> {
    let Some(first) = stack.maps().first() else {
        return Err(Error::validation("cannot average an empty attention stack"));
    };
    if let Some(i) = stack.maps().iter().position(|m| !m.is_stochastic()) {
        return Err(Error::validation(format!("stack member {i} is not row-stochastic")));
    }
    let mut sum = first.data().clone();
    for m in &stack.maps()[1..] {
        sum += m.data();
    }
    let (divisor, stochastic) = match normalizer {
        Normalizer::Count => (stack.len() as f32, true),
        Normalizer::Depth => (stack.len() as f32 + 1.0, false),
    };
    sum.mapv_inplace(|v| v / divisor);
    Ok(SquareMap::from_parts(sum, stochastic))
}

/// `A[0] × A[1] × … × A[H-1]` in stored head order.
pub fn chain_multiply_heads(stack: &AttentionStack) -> Result<SquareMap> {
    if stack.axis() != StackAxis::Heads {
        return Err(Error::validation("chain multiplication expects a per-head stack"));
    }
    let Some(first) = stack.maps().first() else {
        return Err(Error::validation("cannot chain an empty attention stack"));
    };
    if let Some(i) = stack.maps().iter().position(|m| !m.is_stochastic()) {
        return Err(Error::validation(format!("head {i} is not row-stochastic")));
    }
    let mut acc = first.data().clone();
    for m in &stack.maps()[1..] {
        acc = acc.dot(m.data());
    }
    Ok(SquareMap::from_parts(acc, true))
}

/// Propagates a `T x C` score matrix through an attention map: `A × S`.
pub fn refine_scores(attention: &SquareMap, scores: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
    if scores.nrows() != attention.tokens() {
        return Err(Error::shape(format!(
            "score matrix has {} rows, attention map covers {} tokens",
            scores.nrows(),
            attention.tokens()
        )));
    }
    Ok(attention.data().dot(&scores))
}

/// Index of the largest value in each row (first one on ties).
pub fn argmax_rows(m: ArrayView2<'_, f32>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
