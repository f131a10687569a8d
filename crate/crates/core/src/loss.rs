//! Multi-label binary cross-entropy.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Confidences are clamped to `[CLAMP, 1 - CLAMP]` before the logs.
pub const CLAMP: f64 = 1e-7;

/// Mean over the batch of the summed per-class binary cross-entropy,
/// together with its analytic gradient with respect to the confidences.
///
/// Labels must be exactly 0 or 1. Entries whose confidence sits outside the
/// clamp interval contribute a constant term, so their gradient is zero.
pub fn bce_loss(confidences: &Matrix, labels: &Matrix) -> Result<(f64, Matrix)> {
    if confidences.shape() != labels.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!(
                "confidences are {}x{}, labels are {}x{}",
                confidences.rows(),
                confidences.cols(),
                labels.rows(),
                labels.cols()
            ),
        ));
    }
    for &y in labels.data() {
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidArg(format!(
                "labels must be exactly 0 or 1, found {y}"
            )));
        }
    }
    let batch = confidences.rows() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(confidences.rows(), confidences.cols());
    for r in 0..confidences.rows() {
        let d_row = confidences.row(r);
        let y_row = labels.row(r);
        let g_row = grad.row_mut(r);
        for ((&d, &y), g) in d_row.iter().zip(y_row).zip(g_row.iter_mut()) {
            let dc = d.clamp(CLAMP, 1.0 - CLAMP);
            total -= y * dc.ln() + (1.0 - y) * (1.0 - dc).ln();
            if d > CLAMP && d < 1.0 - CLAMP {
                *g = (dc - y) / (dc * (1.0 - dc)) / batch;
            }
        }
    }
    Ok((total / batch, grad))
}
