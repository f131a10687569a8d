//! Adam optimizer over a flat list of parameter blocks.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-block first/second moment accumulators plus the shared step counter
/// and hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<Matrix>,
    second_moment: Vec<Matrix>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(params: &[&Matrix], learning_rate: f64) -> Self {
        AdamState {
            first_moment: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            second_moment: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!(
                    "{} parameter blocks, {} gradient blocks, state has {}",
                    params.len(),
                    grads.len(),
                    self.first_moment.len()
                ),
            ));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            if param.shape() != grad.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter {}x{} vs gradient {}x{}",
                        param.rows(),
                        param.cols(),
                        grad.rows(),
                        grad.cols()
                    ),
                ));
            }
            let p = param.data_mut();
            let g = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..p.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * g[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]).unwrap();
        let snapshot = p.clone();
        let zero = Matrix::zeros(2, 2);
        let mut state = AdamState::new(&[&p], 2e-4);
        for _ in 0..50 {
            state.step(&mut [&mut p], &[&zero]).unwrap();
        }
        assert_eq!(p, snapshot);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // After one step: m_hat = g, v_hat = g^2, so the update is exactly
        // -lr * g / (|g| + eps).
        let lr = 2e-4;
        let g = Matrix::row_vector(&[0.3, -1.7, 4.0]);
        let mut p = Matrix::zeros(1, 3);
        let mut state = AdamState::new(&[&p], lr);
        state.step(&mut [&mut p], &[&g]).unwrap();
        for i in 0..3 {
            let gi = g.get(0, i);
            let want = -lr * gi / (gi.abs() + 1e-8);
            assert!((p.get(0, i) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_drifts_against_its_sign() {
        let g = Matrix::row_vector(&[0.25, -0.5]);
        let mut p = Matrix::zeros(1, 2);
        let mut state = AdamState::new(&[&p], 1e-2);
        let mut prev = [0.0; 2];
        for _ in 0..100 {
            state.step(&mut [&mut p], &[&g]).unwrap();
            assert!(p.get(0, 0) < prev[0], "positive gradient must push down");
            assert!(p.get(0, 1) > prev[1], "negative gradient must push up");
            prev = [p.get(0, 0), p.get(0, 1)];
        }
    }

    #[test]
    fn mismatched_shapes_error() {
        let mut p = Matrix::zeros(2, 2);
        let g = Matrix::zeros(2, 3);
        let mut state = AdamState::new(&[&p], 1e-3);
        assert!(state.step(&mut [&mut p], &[&g]).is_err());
    }
}
