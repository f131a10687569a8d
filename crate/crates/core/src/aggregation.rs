//! Temporal aggregation: collapse a video's frame-level features (N x D)
//! into one video-level vector. Three aggregators are provided, each with
//! an exact backward pass:
//!
//! * average pooling over frames,
//! * deep bag-of-frames: per-frame up-projection, ReLU, batch norm over
//!   the frames, then columnwise max,
//! * learnable VLAD: softmax soft assignment of frames to clusters and
//!   per-cluster weighted residual sums against learnable centers.
//!
//! Each modality owns its own aggregator parameters.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ops::{relu, softmax_rows, xavier_init};
use crate::rng::Rng;

/// Variance floor inside batch-norm denominators.
pub const BN_EPS: f64 = 1e-5;

fn require_frames(op: &'static str, frames: &Matrix) -> Result<()> {
    if frames.rows() == 0 {
        return Err(Error::InvalidArg(format!("{op}: empty video (0 frames)")));
    }
    Ok(())
}

/// Column means over frames.
pub fn avgpool(frames: &Matrix) -> Result<Matrix> {
    require_frames("avgpool", frames)?;
    let n = frames.rows() as f64;
    let mut out = Matrix::zeros(1, frames.cols());
    for r in 0..frames.rows() {
        out.row_mut(0)
            .iter_mut()
            .zip(frames.row(r))
            .for_each(|(o, &v)| *o += v);
    }
    Ok(out.scale(1.0 / n))
}

/// Distributes `grad / N` to every frame.
pub fn avgpool_backward(grad_out: &Matrix, num_frames: usize) -> Matrix {
    let scaled = grad_out.scale(1.0 / num_frames as f64);
    let mut out = Matrix::zeros(num_frames, grad_out.cols());
    for r in 0..num_frames {
        out.row_mut(r).copy_from_slice(scaled.row(0));
    }
    out
}

/// Deep bag-of-frames parameters: an up-projection plus batch-norm state.
#[derive(Debug, Clone)]
pub struct DbofParams {
    pub proj_weights: Matrix,
    pub proj_bias: Matrix,
    pub bn_gamma: Matrix,
    pub bn_beta: Matrix,
    pub bn_running_mean: Matrix,
    pub bn_running_var: Matrix,
    pub bn_momentum: f64,
}

impl DbofParams {
    pub fn init(input_dim: usize, proj_dim: usize, bn_momentum: f64, rng: &mut Rng) -> Self {
        DbofParams {
            proj_weights: xavier_init(input_dim, proj_dim, rng),
            proj_bias: Matrix::zeros(1, proj_dim),
            bn_gamma: Matrix::filled(1, proj_dim, 1.0),
            bn_beta: Matrix::zeros(1, proj_dim),
            bn_running_mean: Matrix::zeros(1, proj_dim),
            bn_running_var: Matrix::filled(1, proj_dim, 1.0),
            bn_momentum,
        }
    }

    pub fn proj_dim(&self) -> usize {
        self.proj_weights.cols()
    }
}

#[derive(Debug, Clone)]
pub struct DbofCache {
    frames: Matrix,
    projected: Matrix,
    activated: Matrix,
    batch_mean: Matrix,
    batch_var: Matrix,
    inv_std: Vec<f64>,
    argmax: Vec<usize>,
    train: bool,
}

impl DbofCache {
    /// Batch statistics gathered during a train-mode forward; the trainer
    /// folds them into the running estimates once per step.
    pub fn batch_stats(&self) -> Option<(&Matrix, &Matrix)> {
        self.train.then_some((&self.batch_mean, &self.batch_var))
    }
}

#[derive(Debug, Clone)]
pub struct DbofGrads {
    pub frames: Matrix,
    pub proj_weights: Matrix,
    pub proj_bias: Matrix,
    pub bn_gamma: Matrix,
    pub bn_beta: Matrix,
}

/// Projection, ReLU, batch norm over the N frames, columnwise max.
///
/// Train mode normalizes with biased batch statistics; eval mode uses the
/// running estimates (variance clamped below at [`BN_EPS`]). Running stats
/// are not mutated here; see [`dbof_update_running_stats`].
pub fn dbof_forward(frames: &Matrix, p: &DbofParams, train: bool) -> Result<(Matrix, DbofCache)> {
    require_frames("dbof", frames)?;
    if frames.cols() != p.proj_weights.rows() {
        return Err(Error::shape(
            "dbof",
            format!(
                "frames are {}x{}, projection expects {} input dims",
                frames.rows(),
                frames.cols(),
                p.proj_weights.rows()
            ),
        ));
    }
    let n = frames.rows();
    let proj_dim = p.proj_dim();
    let mut projected = frames.matmul(&p.proj_weights)?;
    for r in 0..n {
        projected
            .row_mut(r)
            .iter_mut()
            .zip(p.proj_bias.row(0))
            .for_each(|(v, &b)| *v += b);
    }
    let activated = relu(&projected);

    let (mean, var) = if train {
        let mut mean = Matrix::zeros(1, proj_dim);
        for r in 0..n {
            mean.row_mut(0)
                .iter_mut()
                .zip(activated.row(r))
                .for_each(|(m, &v)| *m += v);
        }
        let mean = mean.scale(1.0 / n as f64);
        let mut var = Matrix::zeros(1, proj_dim);
        for r in 0..n {
            var.row_mut(0)
                .iter_mut()
                .zip(activated.row(r))
                .zip(mean.row(0))
                .for_each(|((s, &v), &m)| *s += (v - m) * (v - m));
        }
        (mean, var.scale(1.0 / n as f64))
    } else {
        (
            p.bn_running_mean.clone(),
            p.bn_running_var.map(|v| v.max(0.0)),
        )
    };
    let inv_std: Vec<f64> = var.row(0).iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut normalized = Matrix::zeros(n, proj_dim);
    for r in 0..n {
        let src = activated.row(r);
        let dst = normalized.row_mut(r);
        for j in 0..proj_dim {
            let xhat = (src[j] - mean.get(0, j)) * inv_std[j];
            dst[j] = p.bn_gamma.get(0, j) * xhat + p.bn_beta.get(0, j);
        }
    }

    // Columnwise max; ties go to the lowest frame index so the backward
    // routing is deterministic.
    let mut out = Matrix::zeros(1, proj_dim);
    let mut argmax = vec![0usize; proj_dim];
    for (j, winner) in argmax.iter_mut().enumerate() {
        let mut best = normalized.get(0, j);
        for r in 1..n {
            let v = normalized.get(r, j);
            if v > best {
                best = v;
                *winner = r;
            }
        }
        out.set(0, j, best);
    }

    let cache = DbofCache {
        frames: frames.clone(),
        projected,
        activated,
        batch_mean: mean,
        batch_var: var,
        inv_std,
        argmax,
        train,
    };
    Ok((out, cache))
}

/// Folds the cached batch statistics into the running estimates.
pub fn dbof_update_running_stats(p: &mut DbofParams, cache: &DbofCache) {
    if let Some((mean, var)) = cache.batch_stats() {
        let m = p.bn_momentum;
        for j in 0..p.proj_dim() {
            let rm = p.bn_running_mean.get(0, j);
            p.bn_running_mean.set(0, j, (1.0 - m) * rm + m * mean.get(0, j));
            let rv = p.bn_running_var.get(0, j);
            p.bn_running_var.set(0, j, (1.0 - m) * rv + m * var.get(0, j));
        }
    }
}

/// Reverse-mode pass. Gradient flows only through the argmax frame of each
/// output feature; train mode differentiates through the batch statistics.
pub fn dbof_backward(grad_out: &Matrix, cache: &DbofCache, p: &DbofParams) -> Result<DbofGrads> {
    let n = cache.frames.rows();
    let proj_dim = p.proj_dim();
    if grad_out.shape() != (1, proj_dim) {
        return Err(Error::shape(
            "dbof_backward",
            format!(
                "upstream gradient is {}x{}, expected 1x{}",
                grad_out.rows(),
                grad_out.cols(),
                proj_dim
            ),
        ));
    }

    // Max pool: scatter to the winning frame.
    let mut grad_norm = Matrix::zeros(n, proj_dim);
    for j in 0..proj_dim {
        grad_norm.set(cache.argmax[j], j, grad_out.get(0, j));
    }

    // Batch norm.
    let mut grad_act = Matrix::zeros(n, proj_dim);
    let mut grad_gamma = Matrix::zeros(1, proj_dim);
    let mut grad_beta = Matrix::zeros(1, proj_dim);
    for j in 0..proj_dim {
        let inv = cache.inv_std[j];
        let mean = cache.batch_mean.get(0, j);
        let gamma = p.bn_gamma.get(0, j);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for r in 0..n {
            let dy = grad_norm.get(r, j);
            let xhat = (cache.activated.get(r, j) - mean) * inv;
            sum_dy += dy;
            sum_dy_xhat += dy * xhat;
            grad_gamma.set(0, j, grad_gamma.get(0, j) + dy * xhat);
            grad_beta.set(0, j, grad_beta.get(0, j) + dy);
        }
        if cache.train {
            // Through the batch statistics:
            // dx = gamma*inv/N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
            let nf = n as f64;
            for r in 0..n {
                let dy = grad_norm.get(r, j);
                let xhat = (cache.activated.get(r, j) - mean) * inv;
                let dx = gamma * inv / nf * (nf * dy - sum_dy - xhat * sum_dy_xhat);
                grad_act.set(r, j, dx);
            }
        } else {
            for r in 0..n {
                grad_act.set(r, j, grad_norm.get(r, j) * gamma * inv);
            }
        }
    }

    // ReLU on the projection.
    let grad_proj = grad_act.zip_map(&cache.projected, |g, x| if x > 0.0 { g } else { 0.0 });

    // Linear layer.
    let grad_weights = cache.frames.transposed().matmul(&grad_proj)?;
    let mut grad_bias = Matrix::zeros(1, proj_dim);
    for r in 0..n {
        grad_bias
            .row_mut(0)
            .iter_mut()
            .zip(grad_proj.row(r))
            .for_each(|(b, &g)| *b += g);
    }
    let grad_frames = grad_proj.matmul(&p.proj_weights.transposed())?;

    Ok(DbofGrads {
        frames: grad_frames,
        proj_weights: grad_weights,
        proj_bias: grad_bias,
        bn_gamma: grad_gamma,
        bn_beta: grad_beta,
    })
}

/// Learnable VLAD parameters: assignment weights/bias and cluster centers.
#[derive(Debug, Clone)]
pub struct NetVladParams {
    pub assign_weights: Matrix,
    pub assign_bias: Matrix,
    pub centers: Matrix,
}

impl NetVladParams {
    pub fn init(input_dim: usize, clusters: usize, rng: &mut Rng) -> Self {
        NetVladParams {
            assign_weights: xavier_init(input_dim, clusters, rng),
            assign_bias: Matrix::zeros(1, clusters),
            centers: xavier_init(clusters, input_dim, rng),
        }
    }

    pub fn clusters(&self) -> usize {
        self.assign_weights.cols()
    }
}

/// Soft assignment of each frame to each cluster: row-wise softmax of
/// `frames * W + b`. Rows sum to one.
pub fn netvlad_assign(frames: &Matrix, p: &NetVladParams) -> Result<Matrix> {
    require_frames("netvlad", frames)?;
    let mut logits = frames.matmul(&p.assign_weights)?;
    for r in 0..logits.rows() {
        logits
            .row_mut(r)
            .iter_mut()
            .zip(p.assign_bias.row(0))
            .for_each(|(v, &b)| *v += b);
    }
    Ok(softmax_rows(&logits))
}

/// Weighted residual sums given an explicit assignment matrix. Shared by
/// the forward pass and by hard-assignment reference computations.
pub fn netvlad_pool(frames: &Matrix, centers: &Matrix, assign: &Matrix) -> Matrix {
    let (n, d) = frames.shape();
    let k = centers.rows();
    let mut out = Matrix::zeros(1, k * d);
    for c in 0..k {
        let block = &mut out.row_mut(0)[c * d..(c + 1) * d];
        for i in 0..n {
            let w = assign.get(i, c);
            let frame = frames.row(i);
            let center = centers.row(c);
            for j in 0..d {
                block[j] += w * (frame[j] - center[j]);
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct NetVladCache {
    frames: Matrix,
    assign: Matrix,
}

#[derive(Debug, Clone)]
pub struct NetVladGrads {
    pub frames: Matrix,
    pub assign_weights: Matrix,
    pub assign_bias: Matrix,
    pub centers: Matrix,
}

/// Cluster-order concatenation of per-cluster weighted residual sums:
/// block k is `sum_i alpha_k(h_i) * (h_i - c_k)`.
pub fn netvlad_forward(frames: &Matrix, p: &NetVladParams) -> Result<(Matrix, NetVladCache)> {
    if frames.cols() != p.assign_weights.rows() || frames.cols() != p.centers.cols() {
        return Err(Error::shape(
            "netvlad",
            format!(
                "frames are {}x{}, parameters expect {} input dims",
                frames.rows(),
                frames.cols(),
                p.assign_weights.rows()
            ),
        ));
    }
    let assign = netvlad_assign(frames, p)?;
    let out = netvlad_pool(frames, &p.centers, &assign);
    Ok((
        out,
        NetVladCache {
            frames: frames.clone(),
            assign,
        },
    ))
}

/// Gradients for frames, assignment weights/bias, and centers (including
/// the `-c_k` path).
pub fn netvlad_backward(
    grad_out: &Matrix,
    cache: &NetVladCache,
    p: &NetVladParams,
) -> Result<NetVladGrads> {
    let (n, d) = cache.frames.shape();
    let k = p.clusters();
    if grad_out.shape() != (1, k * d) {
        return Err(Error::shape(
            "netvlad_backward",
            format!(
                "upstream gradient is {}x{}, expected 1x{}",
                grad_out.rows(),
                grad_out.cols(),
                k * d
            ),
        ));
    }
    // View the upstream gradient as K blocks of length D.
    let gmat = Matrix::from_vec(k, d, grad_out.data().to_vec())?;

    // Residual path: d/d(frames) += assign * gmat;
    // d/d(centers)[c] = -(sum_i assign_ic) * gmat[c].
    let mut grad_frames = cache.assign.matmul(&gmat)?;
    let mut grad_centers = Matrix::zeros(k, d);
    for c in 0..k {
        let weight_sum: f64 = (0..n).map(|i| cache.assign.get(i, c)).sum();
        grad_centers
            .row_mut(c)
            .iter_mut()
            .zip(gmat.row(c))
            .for_each(|(g, &v)| *g = -weight_sum * v);
    }

    // Assignment path: d(loss)/d(alpha_ic) = gmat[c] . (h_i - c_c), then
    // back through the row softmax into the logits.
    let mut grad_logits = Matrix::zeros(n, k);
    for i in 0..n {
        let frame = cache.frames.row(i);
        let mut dalpha = vec![0.0; k];
        for (c, slot) in dalpha.iter_mut().enumerate() {
            let center = p.centers.row(c);
            let g = gmat.row(c);
            *slot = (0..d).map(|j| g[j] * (frame[j] - center[j])).sum();
        }
        let alpha = cache.assign.row(i);
        let dot: f64 = dalpha.iter().zip(alpha).map(|(&a, &b)| a * b).sum();
        let out = grad_logits.row_mut(i);
        for c in 0..k {
            out[c] = alpha[c] * (dalpha[c] - dot);
        }
    }

    let grad_assign_weights = cache.frames.transposed().matmul(&grad_logits)?;
    let mut grad_assign_bias = Matrix::zeros(1, k);
    for i in 0..n {
        grad_assign_bias
            .row_mut(0)
            .iter_mut()
            .zip(grad_logits.row(i))
            .for_each(|(b, &g)| *b += g);
    }
    grad_frames.add_assign(&grad_logits.matmul(&p.assign_weights.transposed())?);

    Ok(NetVladGrads {
        frames: grad_frames,
        assign_weights: grad_assign_weights,
        assign_bias: grad_assign_bias,
        centers: grad_centers,
    })
}

/// Samples a video down (or up) to exactly `target` frames.
///
/// With `N >= target` this is a uniform subset without replacement, kept in
/// temporal order; with `N < target` indices are drawn with replacement and
/// sorted. Deterministic for a given generator state.
pub fn sample_frames(frames: &Matrix, target: usize, rng: &mut Rng) -> Matrix {
    assert!(target >= 1, "target must be at least 1");
    let n = frames.rows();
    assert!(n >= 1, "empty video");
    let indices: Vec<usize> = if n == target {
        (0..n).collect()
    } else if n > target {
        // Partial Fisher-Yates, then restore temporal order.
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..target {
            let j = i + rng.below(n - i);
            pool.swap(i, j);
        }
        let mut picked = pool[..target].to_vec();
        picked.sort_unstable();
        picked
    } else {
        let mut picked: Vec<usize> = (0..target).map(|_| rng.below(n)).collect();
        picked.sort_unstable();
        picked
    };
    let mut out = Matrix::zeros(target, frames.cols());
    for (r, &idx) in indices.iter().enumerate() {
        out.row_mut(r).copy_from_slice(frames.row(idx));
    }
    out
}
