//! Mixture-of-experts multi-label classifier.
//!
//! Each class owns `mixtures` gate logits and `mixtures` expert logits,
//! both linear in the fused feature vector. The confidence for a class is
//! the gate-softmax-weighted sum of the expert sigmoids, so every output
//! lies strictly inside (0, 1). Weight columns are grouped class-major:
//! class `j` owns columns `j*mixtures .. (j+1)*mixtures`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ops::xavier_init;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct MoeParams {
    pub gate_weights: Matrix,
    pub expert_weights: Matrix,
    pub mixtures: usize,
    pub classes: usize,
    pub l2_lambda: f64,
}

impl MoeParams {
    pub fn init(
        input_dim: usize,
        classes: usize,
        mixtures: usize,
        l2_lambda: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(mixtures >= 1 && classes >= 1);
        assert!(l2_lambda >= 0.0);
        MoeParams {
            gate_weights: xavier_init(input_dim, mixtures * classes, rng),
            expert_weights: xavier_init(input_dim, mixtures * classes, rng),
            mixtures,
            classes,
            l2_lambda,
        }
    }

    fn check(&self, input: &Matrix) -> Result<()> {
        let width = self.mixtures * self.classes;
        if self.gate_weights.cols() != width
            || self.expert_weights.cols() != width
            || self.gate_weights.rows() != self.expert_weights.rows()
        {
            return Err(Error::shape(
                "moe",
                format!(
                    "weight blocks {}x{} / {}x{} do not realize {} mixtures x {} classes",
                    self.gate_weights.rows(),
                    self.gate_weights.cols(),
                    self.expert_weights.rows(),
                    self.expert_weights.cols(),
                    self.mixtures,
                    self.classes
                ),
            ));
        }
        if input.cols() != self.gate_weights.rows() {
            return Err(Error::shape(
                "moe",
                format!(
                    "input is {}x{}, weights expect {} features",
                    input.rows(),
                    input.cols(),
                    self.gate_weights.rows()
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MoeCache {
    input: Matrix,
    gate_softmax: Matrix,
    expert_sigmoid: Matrix,
}

#[derive(Debug, Clone)]
pub struct MoeGrads {
    pub input: Matrix,
    pub gate_weights: Matrix,
    pub expert_weights: Matrix,
}

/// Per-class confidences `d[b][j] = sum_i softmax(g_j)_i * sigmoid(e_ji)`.
pub fn moe_forward(input: &Matrix, p: &MoeParams) -> Result<(Matrix, MoeCache)> {
    p.check(input)?;
    let (b, m, c) = (input.rows(), p.mixtures, p.classes);
    let gate_logits = input.matmul(&p.gate_weights)?;
    let expert_logits = input.matmul(&p.expert_weights)?;

    let mut gate_softmax = Matrix::zeros(b, m * c);
    let mut expert_sigmoid = Matrix::zeros(b, m * c);
    let mut confidences = Matrix::zeros(b, c);
    for r in 0..b {
        for j in 0..c {
            let span = j * m..(j + 1) * m;
            let logits = &gate_logits.row(r)[span.clone()];
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (i, &g) in logits.iter().enumerate() {
                let e = (g - max).exp();
                gate_softmax.set(r, j * m + i, e);
                denom += e;
            }
            let mut d = 0.0;
            for i in 0..m {
                let alpha = gate_softmax.get(r, j * m + i) / denom;
                gate_softmax.set(r, j * m + i, alpha);
                let sig = 1.0 / (1.0 + (-expert_logits.get(r, j * m + i)).exp());
                expert_sigmoid.set(r, j * m + i, sig);
                d += alpha * sig;
            }
            confidences.set(r, j, d);
        }
    }
    Ok((
        confidences,
        MoeCache {
            input: input.clone(),
            gate_softmax,
            expert_sigmoid,
        },
    ))
}

/// Reverse-mode pass through the per-class gate softmax and expert sigmoid.
pub fn moe_backward(grad_d: &Matrix, cache: &MoeCache, p: &MoeParams) -> Result<MoeGrads> {
    let (b, m, c) = (cache.input.rows(), p.mixtures, p.classes);
    if grad_d.shape() != (b, c) {
        return Err(Error::shape(
            "moe_backward",
            format!(
                "upstream gradient is {}x{}, expected {}x{}",
                grad_d.rows(),
                grad_d.cols(),
                b,
                c
            ),
        ));
    }
    let mut grad_gate_logits = Matrix::zeros(b, m * c);
    let mut grad_expert_logits = Matrix::zeros(b, m * c);
    for r in 0..b {
        for j in 0..c {
            let gd = grad_d.get(r, j);
            // d = sum_i alpha_i * sigma_i
            // d(alpha_i): gd * sigma_i, through row softmax;
            // d(expert logit i): gd * alpha_i * sigma_i * (1 - sigma_i).
            let mut dot = 0.0;
            for i in 0..m {
                let idx = j * m + i;
                let alpha = cache.gate_softmax.get(r, idx);
                let sig = cache.expert_sigmoid.get(r, idx);
                grad_expert_logits.set(r, idx, gd * alpha * sig * (1.0 - sig));
                dot += gd * sig * alpha;
            }
            for i in 0..m {
                let idx = j * m + i;
                let alpha = cache.gate_softmax.get(r, idx);
                let sig = cache.expert_sigmoid.get(r, idx);
                grad_gate_logits.set(r, idx, alpha * (gd * sig - dot));
            }
        }
    }
    let input_t = cache.input.transposed();
    let mut grad_input = grad_gate_logits.matmul(&p.gate_weights.transposed())?;
    grad_input.add_assign(&grad_expert_logits.matmul(&p.expert_weights.transposed())?);
    Ok(MoeGrads {
        input: grad_input,
        gate_weights: input_t.matmul(&grad_gate_logits)?,
        expert_weights: input_t.matmul(&grad_expert_logits)?,
    })
}

/// `lambda * (||W_gate||^2 + ||W_expert||^2)`, added to the training loss.
pub fn moe_l2_penalty(p: &MoeParams) -> f64 {
    p.l2_lambda * (p.gate_weights.sum_sq() + p.expert_weights.sum_sq())
}

/// Gradient of [`moe_l2_penalty`]: `2 * lambda * W` for each block.
pub fn moe_l2_grads(p: &MoeParams) -> (Matrix, Matrix) {
    (
        p.gate_weights.scale(2.0 * p.l2_lambda),
        p.expert_weights.scale(2.0 * p.l2_lambda),
    )
}
