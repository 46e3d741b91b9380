//! Conversions between candle tensors and `ndarray` arrays.

use candle_core::{DType, Device, Tensor};
use hiseg_core::fusion::{LayerNormParams, Linear};
use hiseg_core::{Error, Result};
use ndarray::{Array1, Array2, Array3};

/// Wraps a candle failure as an environment error naming what was running.
pub(crate) fn env(context: &str) -> impl Fn(candle_core::Error) -> Error + '_ {
    move |e| Error::environment(format!("{context}: {e}"))
}

pub fn to_array1(t: &Tensor) -> Result<Array1<f32>> {
    let v = t.to_dtype(DType::F32).and_then(|t| t.to_vec1::<f32>()).map_err(env("tensor readback"))?;
    Ok(Array1::from(v))
}

pub fn to_array2(t: &Tensor) -> Result<Array2<f32>> {
    let (r, c) = t.dims2().map_err(env("tensor readback"))?;
    let v = t
        .to_dtype(DType::F32)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1::<f32>())
        .map_err(env("tensor readback"))?;
    Array2::from_shape_vec((r, c), v).map_err(|e| Error::shape(e.to_string()))
}

pub fn to_array3(t: &Tensor) -> Result<Array3<f32>> {
    let (a, b, c) = t.dims3().map_err(env("tensor readback"))?;
    let v = t
        .to_dtype(DType::F32)
        .and_then(|t| t.flatten_all())
        .and_then(|t| t.to_vec1::<f32>())
        .map_err(env("tensor readback"))?;
    Array3::from_shape_vec((a, b, c), v).map_err(|e| Error::shape(e.to_string()))
}

pub fn from_array<D: ndarray::Dimension>(a: &ndarray::Array<f32, D>, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = a.as_standard_layout().iter().copied().collect();
    Tensor::from_vec(data, a.shape(), device).map_err(env("tensor upload"))
}

pub(crate) fn linear_to_array(l: &candle_nn::Linear) -> Result<Linear> {
    let weight = to_array2(l.weight())?;
    let bias = l.bias().map(to_array1).transpose()?;
    Linear::new(weight, bias)
}

pub(crate) fn norm_to_array(weight: &Tensor, bias: &Tensor, eps: f64) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        weight: to_array1(weight)?,
        bias: to_array1(bias)?,
        eps: eps as f32,
    })
}
