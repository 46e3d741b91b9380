//! Separable resampling of `H x W x C` arrays.
//!
//! All kernels use half-pixel centres (`align_corners = false`), so results
//! line up with the usual deep-learning framework conventions.

use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
    Bicubic,
}

impl FromStr for Interpolation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Interpolation::Bilinear),
            "nearest" => Ok(Interpolation::Nearest),
            "bicubic" => Ok(Interpolation::Bicubic),
            other => Err(Error::config(format!("unknown interpolation `{other}`"))),
        }
    }
}

/// Source indices and weights contributing to each output position.
fn taps(input: usize, output: usize, interp: Interpolation) -> Vec<Vec<(usize, f32)>> {
    let scale = input as f64 / output as f64;
    let last = input as isize - 1;
    let clamp = |i: isize| i.clamp(0, last) as usize;
    (0..output)
        .map(|d| match interp {
            Interpolation::Nearest => {
                let i = ((d as f64 * scale).floor() as usize).min(input - 1);
                vec![(i, 1.0)]
            }
            Interpolation::Bilinear => {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = src.floor() as isize;
                let frac = (src - i0 as f64) as f32;
                let i1 = clamp(i0 + 1);
                vec![(clamp(i0), 1.0 - frac), (i1, frac)]
            }
            Interpolation::Bicubic => {
                let src = (d as f64 + 0.5) * scale - 0.5;
                let i0 = src.floor() as isize;
                let t = src - i0 as f64;
                let w = cubic_weights(t);
                (0..4).map(|k| (clamp(i0 - 1 + k as isize), w[k] as f32)).collect()
            }
        })
        .collect()
}

/// Keys cubic convolution weights with `a = -0.75`.
fn cubic_weights(t: f64) -> [f64; 4] {
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Resizes every channel of an `H x W x C` array to `out_h x out_w`.
pub fn resize_hwc(
    input: ArrayView3<'_, f32>,
    out_h: usize,
    out_w: usize,
    interp: Interpolation,
) -> Result<Array3<f32>> {
    let (h, w, c) = input.dim();
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::validation(format!(
            "cannot resample {h}x{w} to {out_h}x{out_w}"
        )));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(input.as_standard_layout().into_owned());
    }
    let row_taps = taps(h, out_h, interp);
    let col_taps = taps(w, out_w, interp);
    let mut rows = Array3::<f32>::zeros((out_h, w, c));
    for (y, tap) in row_taps.iter().enumerate() {
        let mut dst = rows.index_axis_mut(Axis(0), y);
        for &(i, wt) in tap {
            if wt != 0.0 {
                dst.scaled_add(wt, &input.index_axis(Axis(0), i));
            }
        }
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, c));
    for (x, tap) in col_taps.iter().enumerate() {
        let mut dst = out.index_axis_mut(Axis(1), x);
        for &(i, wt) in tap {
            if wt != 0.0 {
                dst.scaled_add(wt, &rows.index_axis(Axis(1), i));
            }
        }
    }
    Ok(out)
}

/// Resizes a single-channel `H x W` array.
pub fn resize_2d(input: ArrayView2<'_, f32>, out_h: usize, out_w: usize, interp: Interpolation) -> Result<Array2<f32>> {
    let (h, w) = input.dim();
    let expanded = input.as_standard_layout().into_owned().into_shape_with_order((h, w, 1)).expect("standard layout");
    let out = resize_hwc(expanded.view(), out_h, out_w, interp)?;
    Ok(out.index_axis_move(Axis(2), 0))
}

/// Resamples the patch rows of a `(1 + h*w) x D` position table (class row
/// first) from grid `from` to grid `to` with bicubic interpolation.
pub fn interpolate_positions(
    table: ArrayView2<'_, f32>,
    from: (usize, usize),
    to: (usize, usize),
) -> Result<Array2<f32>> {
    let (n, d) = table.dim();
    if n != from.0 * from.1 + 1 {
        return Err(Error::shape(format!("position table has {n} rows for a {from:?} grid")));
    }
    if from == to {
        return Ok(table.to_owned());
    }
    let grid = table
        .slice(ndarray::s![1.., ..])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((from.0, from.1, d))
        .expect("row count checked");
    let resized = resize_hwc(grid.view(), to.0, to.1, Interpolation::Bicubic)?;
    let mut out = Array2::zeros((to.0 * to.1 + 1, d));
    out.row_mut(0).assign(&table.row(0));
    out.slice_mut(ndarray::s![1.., ..])
        .assign(&resized.into_shape_with_order((to.0 * to.1, d)).expect("standard layout"));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn bilinear_corner_pattern_by_hand() {
        let src = array![[0.0f32, 1.0], [2.0, 3.0]];
        let out = resize_2d(src.view(), 4, 4, Interpolation::Bilinear).unwrap();
        // horizontal weights per output column: 1|0, .75|.25, .25|.75, 0|1
        let x = [0.0, 0.25, 0.75, 1.0];
        let y = [0.0, 0.5, 1.5, 2.0];
        for r in 0..4 {
            for c in 0..4 {
                assert_abs_diff_eq!(out[[r, c]], x[c] + y[r], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let src = Array3::from_shape_fn((3, 5, 2), |(a, b, c)| (a * 10 + b) as f32 - c as f32);
        for interp in [Interpolation::Bilinear, Interpolation::Nearest, Interpolation::Bicubic] {
            assert_eq!(resize_hwc(src.view(), 3, 5, interp).unwrap(), src);
        }
    }

    #[test]
    fn constants_survive_every_kernel() {
        let src = Array3::from_elem((3, 4, 2), 0.7f32);
        for interp in [Interpolation::Bilinear, Interpolation::Nearest, Interpolation::Bicubic] {
            let out = resize_hwc(src.view(), 7, 5, interp).unwrap();
            for v in out {
                assert_abs_diff_eq!(v, 0.7, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn nearest_uses_floor_of_scaled_index() {
        let src = array![[1.0f32, 2.0, 3.0]];
        let out = resize_2d(src.view(), 1, 6, Interpolation::Nearest).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let down = resize_2d(array![[1.0f32, 2.0, 3.0, 4.0]].view(), 1, 2, Interpolation::Nearest).unwrap();
        assert_eq!(down.row(0).to_vec(), vec![1.0, 3.0]);
    }

    #[test]
    fn bilinear_downsample_by_two_averages_pairs() {
        let src = array![[1.0f32, 3.0, 5.0, 7.0]];
        let out = resize_2d(src.view(), 1, 2, Interpolation::Bilinear).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![2.0, 6.0]);
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for t in [0.0, 0.1, 0.5, 0.9] {
            let s: f64 = cubic_weights(t).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
        assert_eq!(cubic_weights(0.0), [0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn bicubic_matches_torch_reference_values() {
        // torch.nn.functional.interpolate(x, size=4, mode="bicubic", align_corners=False)
        // on x = [0, 1] gives [-0.10546875, 0.2265625, 0.7734375, 1.10546875].
        let out = resize_2d(array![[0.0f32, 1.0]].view(), 1, 4, Interpolation::Bicubic).unwrap();
        let want = [-0.10546875, 0.2265625, 0.7734375, 1.105_468_8];
        for (a, b) in out.row(0).iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn position_table_keeps_class_row_and_identity_grid() {
        let t = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f32);
        assert_eq!(interpolate_positions(t.view(), (2, 2), (2, 2)).unwrap(), t);
        let up = interpolate_positions(t.view(), (2, 2), (3, 4)).unwrap();
        assert_eq!(up.dim(), (13, 3));
        assert_eq!(up.row(0), t.row(0));
        assert!(interpolate_positions(t.view(), (3, 2), (2, 2)).is_err());
    }

    #[test]
    fn rejects_empty() {
        assert!(resize_hwc(Array3::zeros((0, 2, 1)).view(), 2, 2, Interpolation::Bilinear).is_err());
    }
}
