//! Fusion operators over aggregated video and audio features.
//!
//! The factorized bilinear operator computes, per output feature `i`,
//! `f_i = l^T W_i a` with each `W_i` factored as a product of two rank-k
//! banks. In batched form that is an elementwise product of the two
//! projections followed by non-overlapping sum pooling with window `k`
//! along features, then ReLU and row-wise L2 normalization. The plain
//! concatenation and projected-concatenation baselines share this module
//! so all three present the same forward/backward interface.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ops::{dropout_mask, l2_normalize_rows, relu, xavier_init};
use crate::rng::Rng;

/// Epsilon inside the row-norm square root; keeps zero rows at zero.
pub const NORM_EPS: f64 = 1e-12;

/// Low-rank factor banks for bilinear fusion.
///
/// Columns are grouped output-major: output `i` owns the `rank` consecutive
/// columns starting at `i * rank`, so `visual_factors` and `audio_factors`
/// are `C x (rank*out_dim)` and `M x (rank*out_dim)`.
#[derive(Debug, Clone)]
pub struct MfbParams {
    pub visual_factors: Matrix,
    pub audio_factors: Matrix,
    pub rank: usize,
    pub out_dim: usize,
}

impl MfbParams {
    pub fn init(
        visual_dim: usize,
        audio_dim: usize,
        rank: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        assert!(rank >= 1 && out_dim >= 1);
        MfbParams {
            visual_factors: xavier_init(visual_dim, rank * out_dim, rng),
            audio_factors: xavier_init(audio_dim, rank * out_dim, rng),
            rank,
            out_dim,
        }
    }

    fn check(&self, visual: &Matrix, audio: &Matrix) -> Result<()> {
        let width = self.rank * self.out_dim;
        if self.visual_factors.cols() != width || self.audio_factors.cols() != width {
            return Err(Error::shape(
                "mfb",
                format!(
                    "factor banks are {}x{} and {}x{}, expected width rank*out_dim = {}",
                    self.visual_factors.rows(),
                    self.visual_factors.cols(),
                    self.audio_factors.rows(),
                    self.audio_factors.cols(),
                    width
                ),
            ));
        }
        if visual.cols() != self.visual_factors.rows() || audio.cols() != self.audio_factors.rows() {
            return Err(Error::shape(
                "mfb",
                format!(
                    "inputs {}x{} and {}x{} do not match factor banks with {} and {} input dims",
                    visual.rows(),
                    visual.cols(),
                    audio.rows(),
                    audio.cols(),
                    self.visual_factors.rows(),
                    self.audio_factors.rows()
                ),
            ));
        }
        if visual.rows() != audio.rows() {
            return Err(Error::shape(
                "mfb",
                format!("batch sizes differ: {} vs {}", visual.rows(), audio.rows()),
            ));
        }
        Ok(())
    }
}

/// Full (unfactored) bilinear form: `out_i = l^T W_i a`.
///
/// Reference oracle for the factorized path; quadratic in the feature dims,
/// never used in training.
pub fn bilinear_full(l: &Matrix, a: &Matrix, weights: &[Matrix]) -> Result<Matrix> {
    if l.rows() != 1 || a.rows() != 1 {
        return Err(Error::shape("bilinear_full", "expects single-row inputs"));
    }
    let mut out = Matrix::zeros(1, weights.len());
    for (i, w) in weights.iter().enumerate() {
        if w.rows() != l.cols() || w.cols() != a.cols() {
            return Err(Error::shape(
                "bilinear_full",
                format!(
                    "weight {} is {}x{}, expected {}x{}",
                    i,
                    w.rows(),
                    w.cols(),
                    l.cols(),
                    a.cols()
                ),
            ));
        }
        let mut acc = 0.0;
        for r in 0..w.rows() {
            let lv = l.get(0, r);
            let wrow = w.row(r);
            for (c, &wv) in wrow.iter().enumerate() {
                acc += lv * wv * a.get(0, c);
            }
        }
        out.set(0, i, acc);
    }
    Ok(out)
}

/// Sums each non-overlapping window of `k` columns.
fn sum_pool(x: &Matrix, k: usize) -> Matrix {
    debug_assert_eq!(x.cols() % k, 0);
    let out_cols = x.cols() / k;
    let mut out = Matrix::zeros(x.rows(), out_cols);
    for r in 0..x.rows() {
        let row = x.row(r);
        let out_row = out.row_mut(r);
        for (j, chunk) in row.chunks_exact(k).enumerate() {
            out_row[j] = chunk.iter().sum();
        }
    }
    out
}

/// Expands pooled-space gradients back to factor space (inverse of `sum_pool`).
fn sum_pool_backward(grad: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::zeros(grad.rows(), grad.cols() * k);
    for r in 0..grad.rows() {
        let grow = grad.row(r);
        let orow = out.row_mut(r);
        for (j, &g) in grow.iter().enumerate() {
            for slot in &mut orow[j * k..(j + 1) * k] {
                *slot = g;
            }
        }
    }
    out
}

/// Bare factorized bilinear map: projections, elementwise product, sum pool.
/// Equals [`bilinear_full`] with `W_i = U_i V_i^T`.
pub fn mfb_core(visual: &Matrix, audio: &Matrix, p: &MfbParams) -> Result<Matrix> {
    p.check(visual, audio)?;
    let zl = visual.matmul(&p.visual_factors)?;
    let za = audio.matmul(&p.audio_factors)?;
    Ok(sum_pool(&zl.hadamard(&za), p.rank))
}

/// Intermediates retained by [`mfb_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MfbCache {
    visual: Matrix,
    audio: Matrix,
    visual_proj: Matrix,
    audio_proj: Matrix,
    mask: Option<Matrix>,
    pooled: Matrix,
    relu_out: Matrix,
    inv_norms: Vec<f64>,
}

/// Gradients of the fused output with respect to inputs and factor banks.
#[derive(Debug, Clone)]
pub struct MfbGrads {
    pub visual: Matrix,
    pub audio: Matrix,
    pub visual_factors: Matrix,
    pub audio_factors: Matrix,
}

/// Full fusion pipeline: product of projections, dropout on the product
/// (training only), sum pooling, ReLU, row-wise L2 normalization.
pub fn mfb_forward(
    visual: &Matrix,
    audio: &Matrix,
    p: &MfbParams,
    dropout_rate: f64,
    rng: &mut Rng,
    train: bool,
) -> Result<(Matrix, MfbCache)> {
    p.check(visual, audio)?;
    let zl = visual.matmul(&p.visual_factors)?;
    let za = audio.matmul(&p.audio_factors)?;
    let mut prod = zl.hadamard(&za);
    let mask = if train && dropout_rate > 0.0 {
        let m = dropout_mask(prod.rows(), prod.cols(), dropout_rate, rng)?;
        prod = prod.hadamard(&m);
        Some(m)
    } else {
        None
    };
    let pooled = sum_pool(&prod, p.rank);
    let relu_out = relu(&pooled);
    let normed = l2_normalize_rows(&relu_out, NORM_EPS);
    let inv_norms = (0..relu_out.rows())
        .map(|r| {
            let s: f64 = relu_out.row(r).iter().map(|v| v * v).sum();
            1.0 / (s + NORM_EPS).sqrt()
        })
        .collect();
    let cache = MfbCache {
        visual: visual.clone(),
        audio: audio.clone(),
        visual_proj: zl,
        audio_proj: za,
        mask,
        pooled,
        relu_out,
        inv_norms,
    };
    Ok((normed, cache))
}

/// Reverse-mode pass through the full fusion pipeline.
pub fn mfb_backward(grad_out: &Matrix, cache: &MfbCache, p: &MfbParams) -> Result<MfbGrads> {
    if grad_out.shape() != cache.pooled.shape() {
        return Err(Error::shape(
            "mfb_backward",
            format!(
                "upstream gradient is {}x{}, cache expects {}x{}",
                grad_out.rows(),
                grad_out.cols(),
                cache.pooled.rows(),
                cache.pooled.cols()
            ),
        ));
    }

    // Normalization: f = r * inv, inv = (sum r^2 + eps)^{-1/2}
    // dr_j = g_j*inv - r_j * inv^3 * <g, r>   (per row)
    let mut grad_relu = Matrix::zeros(grad_out.rows(), grad_out.cols());
    for r in 0..grad_out.rows() {
        let inv = cache.inv_norms[r];
        let g = grad_out.row(r);
        let rr = cache.relu_out.row(r);
        let dot: f64 = g.iter().zip(rr).map(|(&a, &b)| a * b).sum();
        let out = grad_relu.row_mut(r);
        for ((o, &gj), &rj) in out.iter_mut().zip(g).zip(rr) {
            *o = gj * inv - rj * inv * inv * inv * dot;
        }
    }

    // ReLU subgradient: 0 at exactly 0.
    let grad_pooled = grad_relu.zip_map(&cache.pooled, |g, x| if x > 0.0 { g } else { 0.0 });

    let mut grad_prod = sum_pool_backward(&grad_pooled, p.rank);
    if let Some(mask) = &cache.mask {
        grad_prod = grad_prod.hadamard(mask);
    }

    let grad_visual_proj = grad_prod.hadamard(&cache.audio_proj);
    let grad_audio_proj = grad_prod.hadamard(&cache.visual_proj);

    Ok(MfbGrads {
        visual: grad_visual_proj.matmul(&p.visual_factors.transposed())?,
        audio: grad_audio_proj.matmul(&p.audio_factors.transposed())?,
        visual_factors: cache.visual.transposed().matmul(&grad_visual_proj)?,
        audio_factors: cache.audio.transposed().matmul(&grad_audio_proj)?,
    })
}

/// Columnwise concatenation, visual features first.
pub fn concat_forward(visual: &Matrix, audio: &Matrix) -> Result<Matrix> {
    visual.concat_cols(audio)
}

/// Splits the upstream gradient back into per-modality parts.
pub fn concat_backward(grad_out: &Matrix, visual_dim: usize) -> (Matrix, Matrix) {
    grad_out.split_cols(visual_dim)
}

/// Per-modality linear projections sized to match the bilinear factor banks.
#[derive(Debug, Clone)]
pub struct FcConcatParams {
    pub visual_proj: Matrix,
    pub audio_proj: Matrix,
}

impl FcConcatParams {
    /// Projection widths equal `rank * out_dim`, giving exactly the same
    /// parameter count as the factorized bilinear operator.
    pub fn init(
        visual_dim: usize,
        audio_dim: usize,
        rank: usize,
        out_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        FcConcatParams {
            visual_proj: xavier_init(visual_dim, rank * out_dim, rng),
            audio_proj: xavier_init(audio_dim, rank * out_dim, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.visual_proj.len() + self.audio_proj.len()
    }
}

#[derive(Debug, Clone)]
pub struct FcConcatCache {
    visual: Matrix,
    audio: Matrix,
}

#[derive(Debug, Clone)]
pub struct FcConcatGrads {
    pub visual: Matrix,
    pub audio: Matrix,
    pub visual_proj: Matrix,
    pub audio_proj: Matrix,
}

/// Projects each modality, then concatenates (projected visual first).
pub fn fc_concat_forward(
    visual: &Matrix,
    audio: &Matrix,
    p: &FcConcatParams,
) -> Result<(Matrix, FcConcatCache)> {
    let pv = visual.matmul(&p.visual_proj)?;
    let pa = audio.matmul(&p.audio_proj)?;
    let out = pv.concat_cols(&pa)?;
    Ok((
        out,
        FcConcatCache {
            visual: visual.clone(),
            audio: audio.clone(),
        },
    ))
}

pub fn fc_concat_backward(
    grad_out: &Matrix,
    cache: &FcConcatCache,
    p: &FcConcatParams,
) -> Result<FcConcatGrads> {
    let width = p.visual_proj.cols();
    if grad_out.cols() != width + p.audio_proj.cols() {
        return Err(Error::shape(
            "fc_concat_backward",
            format!(
                "upstream gradient has {} cols, expected {}",
                grad_out.cols(),
                width + p.audio_proj.cols()
            ),
        ));
    }
    let (gv, ga) = grad_out.split_cols(width);
    Ok(FcConcatGrads {
        visual: gv.matmul(&p.visual_proj.transposed())?,
        audio: ga.matmul(&p.audio_proj.transposed())?,
        visual_proj: cache.visual.transposed().matmul(&gv)?,
        audio_proj: cache.audio.transposed().matmul(&ga)?,
    })
}
