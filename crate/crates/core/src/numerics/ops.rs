//! Nonlinearities and normalizations used by the residual head.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Layer-norm stabilizer added to the variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEFF: f64 = 0.044_715;

fn sqrt_2_over_pi() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

/// Tanh-approximation GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let inner = sqrt_2_over_pi() * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let k = sqrt_2_over_pi();
    let t = (k * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub fn gelu(x: &Matrix) -> Matrix {
    x.map(gelu_scalar)
}

/// Row-wise normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean / unit variance, then applies `gain` and
/// `bias` (both `1 × cols`).
pub fn layer_normalize(x: &Matrix, gain: &Matrix, bias: &Matrix) -> Result<Matrix> {
    layer_normalize_cached(x, gain, bias).map(|(y, _)| y)
}

pub fn layer_normalize_cached(
    x: &Matrix,
    gain: &Matrix,
    bias: &Matrix,
) -> Result<(Matrix, LayerNormCache)> {
    let cols = x.cols();
    if gain.shape() != (1, cols) || bias.shape() != (1, cols) {
        return Err(Error::shape(
            "layer_normalize",
            format!(
                "gain {:?} / bias {:?} for input {:?}",
                gain.shape(),
                bias.shape(),
                x.shape()
            ),
        ));
    }
    let n = cols as f64;
    let mut normalized = Matrix::zeros(x.rows(), cols);
    let mut out = Matrix::zeros(x.rows(), cols);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(inv);
        let norm_row = normalized.row_mut(r);
        for (o, v) in norm_row.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let out_row = out.row_mut(r);
        for c in 0..cols {
            out_row[c] = normalized.get(r, c) * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}
