//! Named-array fixtures.
//!
//! A fixture is a safetensors file holding `f32` little-endian row-major
//! arrays (conventional names: `maps`, `Q`, `K`, `V`, `scores`) next to a
//! JSON sidecar `<stem>.meta.json` that records the array shapes, the head
//! order of per-head stacks and the configuration that produced the data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use safetensors::{tensor::TensorView, Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionStack, SquareMap, StackAxis};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FixtureMeta {
    /// What the fixture holds, e.g. `sd_attention` or `layer_trace`.
    pub kind: String,
    pub shapes: BTreeMap<String, Vec<usize>>,
    /// Identifiers of the heads of a per-head stack, in stored order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub head_order: Vec<String>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Fixture {
    pub arrays: BTreeMap<String, ArrayD<f32>>,
    pub meta: FixtureMeta,
}

/// Path of the metadata sidecar for a fixture file.
pub fn meta_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("fixture");
    path.with_file_name(format!("{stem}.meta.json"))
}

impl Fixture {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            arrays: BTreeMap::new(),
            meta: FixtureMeta {
                kind: kind.into(),
                ..Default::default()
            },
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f32>) -> &mut Self {
        self.arrays.insert(name.into(), array);
        self
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::validation(format!("fixture has no array `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: BTreeMap<&str, Vec<u8>> = self
            .arrays
            .iter()
            .map(|(k, a)| {
                let le: Vec<u8> = a.as_standard_layout().iter().flat_map(|v| v.to_le_bytes()).collect();
                (k.as_str(), le)
            })
            .collect();
        let views = self
            .arrays
            .iter()
            .map(|(k, a)| {
                TensorView::new(Dtype::F32, a.shape().to_vec(), &bytes[k.as_str()])
                    .map(|v| (k.as_str(), v))
                    .map_err(|e| Error::validation(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let data = safetensors::serialize(views, None).map_err(|e| Error::data(path, e.to_string()))?;
        std::fs::write(path, data).map_err(|e| Error::io(path, e))?;
        let mut meta = self.meta.clone();
        meta.shapes = self.arrays.iter().map(|(k, a)| (k.clone(), a.shape().to_vec())).collect();
        let mp = meta_path(path);
        let json = serde_json::to_string_pretty(&meta).expect("metadata serialises");
        std::fs::write(&mp, json).map_err(|e| Error::io(&mp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let st = SafeTensors::deserialize(&data).map_err(|e| Error::data(path, e.to_string()))?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::data(path, format!("array `{name}` is {:?}, expected F32", view.dtype())));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values)
                .map_err(|e| Error::data(path, e.to_string()))?;
            arrays.insert(name, arr);
        }
        let mp = meta_path(path);
        let meta: FixtureMeta = match std::fs::read_to_string(&mp) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::data(&mp, e.to_string()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => FixtureMeta::default(),
            Err(e) => return Err(Error::io(&mp, e)),
        };
        for (name, shape) in &meta.shapes {
            match arrays.get(name) {
                Some(a) if a.shape() == shape.as_slice() => {}
                _ => return Err(Error::data(&mp, format!("recorded shape of `{name}` does not match the data"))),
            }
        }
        Ok(Self { arrays, meta })
    }
}

/// `n x T x T` array from a stack of square maps.
pub fn stack_to_array(stack: &AttentionStack) -> ArrayD<f32> {
    let t = stack.tokens().unwrap_or(0);
    let mut out = Array3::zeros((stack.len(), t, t));
    for (i, m) in stack.maps().iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(m.data());
    }
    out.into_dyn()
}

/// Inverse of [`stack_to_array`]; maps are validated as row-stochastic.
pub fn array_to_stack(a: &ArrayD<f32>, axis: StackAxis) -> Result<AttentionStack> {
    let a3 = a
        .view()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::shape(format!("expected an n x T x T array, got {:?}", a.shape())))?;
    let maps = a3
        .axis_iter(Axis(0))
        .map(|m| SquareMap::stochastic(m.to_owned()))
        .collect::<Result<Vec<_>>>()?;
    AttentionStack::new(maps, axis)
}

pub fn to_2d(a: &ArrayD<f32>) -> Result<Array2<f32>> {
    a.clone()
        .into_dimensionality()
        .map_err(|_| Error::shape(format!("expected a matrix, got {:?}", a.shape())))
}

pub fn to_3d(a: &ArrayD<f32>) -> Result<Array3<f32>> {
    a.clone()
        .into_dimensionality()
        .map_err(|_| Error::shape(format!("expected a 3-d array, got {:?}", a.shape())))
}
