//! Elementwise activations, row normalizations, and parameter initialization.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Rng;

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Elementwise logistic function; saturates cleanly for large inputs.
pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Elementwise `max(x, 0)`.
pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Divides each row by `sqrt(sum_of_squares + eps)`.
///
/// With `eps > 0` a zero row maps to a zero row instead of NaN; with
/// `eps == 0` a zero row is left unchanged.
pub fn l2_normalize_rows(x: &Matrix, eps: f64) -> Matrix {
    assert!(eps >= 0.0, "negative eps");
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let denom = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
        if denom > 0.0 {
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
    }
    out
}

/// Uniform Xavier/Glorot initialization in `±sqrt(6 / (rows + cols))`.
pub fn xavier_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "degenerate shape {rows}x{cols}");
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized above")
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// `1 / (1 - rate)`, so the mask has unit expectation.
pub fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut Rng) -> Result<Matrix> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArg(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if rate == 0.0 {
        return Ok(Matrix::filled(rows, cols, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..rows * cols)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    Matrix::from_vec(rows, cols, data)
}
