//! Layer sensitivity from the PCA spectrum of the conv weight matrix.
//!
//! Rows of the `(c_out, Nc)` weight matrix are the observations. After centring, the
//! relative Frobenius error of keeping the top `k` principal components is
//! `sqrt(sum_{i >= k} s_i^2) / sqrt(sum_i s_i^2)` over singular values `s`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::nn::ConvLayer;
use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityCurve {
    pub layer_id: usize,
    pub retained_fraction: Vec<f64>,
    pub normalized_error: Vec<f64>,
}

/// `0.05, 0.10, ..., 1.00`.
pub fn default_fraction_grid() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

/// Components kept for fraction `f` out of `rank`: `ceil(f * rank)`, at least one.
pub fn components_for(fraction: f64, rank: usize) -> usize {
    ((fraction * rank as f64).ceil() as usize).clamp(1, rank)
}

/// Normalised reconstruction error curve of a row-major `rows x cols` matrix.
pub fn pca_sensitivity(
    layer_id: usize,
    matrix: &[f64],
    rows: usize,
    cols: usize,
    fractions: &[f64],
) -> Result<SensitivityCurve> {
    if rows < 2 || cols == 0 || matrix.len() != rows * cols {
        return Err(Error::Shape(format!(
            "PCA needs a matrix with at least 2 rows; got {rows}x{cols} with {} values",
            matrix.len()
        )));
    }
    if let Some(f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("retained fraction {f} must lie in (0, 1]")));
    }
    let mut m = DMatrix::from_row_slice(rows, cols, matrix);
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    let total = m.norm_squared();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Config(format!(
            "layer {layer_id}: centred weight matrix is degenerate (zero or non-finite)"
        )));
    }
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let rank = sv.len();
    // tail[k] = sum_{i >= k} s_i^2, accumulated from the smallest value up
    let mut tail = vec![0.0; rank + 1];
    for k in (0..rank).rev() {
        tail[k] = tail[k + 1] + sv[k] * sv[k];
    }
    let spectrum = tail[0];
    let normalized_error = fractions
        .iter()
        .map(|&f| (tail[components_for(f, rank)] / spectrum).sqrt().min(1.0))
        .collect();
    Ok(SensitivityCurve {
        layer_id,
        retained_fraction: fractions.to_vec(),
        normalized_error,
    })
}

pub fn layer_sensitivity<T: Real>(layer_id: usize, layer: &ConvLayer<T>, fractions: &[f64]) -> Result<SensitivityCurve> {
    let data: Vec<f64> = layer.weights().data().iter().map(|v| v.as_f64()).collect();
    pca_sensitivity(layer_id, &data, layer.out_channels(), layer.columns(), fractions)
}
