//! Central finite-difference verification of every hand-written backward
//! pass. Each check builds a small random instance, computes analytic
//! gradients for the scalar objective `sum(G .* output)` with a fixed
//! random upstream `G`, and compares against central differences on every
//! parameter entry.

use crate::aggregation::{
    avgpool, avgpool_backward, dbof_backward, dbof_forward, netvlad_backward, netvlad_forward,
    DbofParams, NetVladParams,
};
use crate::config::{AggKind, FusionKind, RunConfig};
use crate::data::Batch;
use crate::error::Result;
use crate::fusion::{
    fc_concat_backward, fc_concat_forward, mfb_backward, mfb_forward, FcConcatParams, MfbParams,
};
use crate::loss::bce_loss;
use crate::matrix::Matrix;
use crate::model::{Modality, Model, ModelSpec};
use crate::moe::{moe_backward, moe_forward, MoeParams};
use crate::rng::{derive_seed, Rng};

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative error floor: entries whose analytic and numeric gradients are
/// both below this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-5;
/// Tolerance for every operator except the loss.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Tolerance for the loss gradient (it is cheap and very smooth).
pub const LOSS_TOL: f64 = 1e-6;

/// Outcome of one operator's check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central finite differences of `f` at `params`, one matrix per parameter
/// block, then the worst relative error against the analytic blocks.
fn compare_fd(
    f: &mut dyn FnMut(&[Matrix]) -> f64,
    params: &[Matrix],
    analytic: &[Matrix],
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut worst: f64 = 0.0;
    let mut work: Vec<Matrix> = params.to_vec();
    for b in 0..params.len() {
        assert_eq!(params[b].shape(), analytic[b].shape());
        for i in 0..params[b].len() {
            let orig = work[b].data()[i];
            work[b].data_mut()[i] = orig + FD_STEP;
            let plus = f(&work);
            work[b].data_mut()[i] = orig - FD_STEP;
            let minus = f(&work);
            work[b].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[b].data()[i], numeric));
        }
    }
    worst
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
        .expect("sized data")
}

/// Adds a visible corruption to the first analytic block. Test hook for
/// verifying the suite actually detects broken gradients.
fn maybe_perturb(analytic: &mut [Matrix], perturb: bool) {
    if perturb {
        if let Some(first) = analytic.first_mut() {
            let v = first.data()[0];
            first.data_mut()[0] = v + 1e-2;
        }
    }
}

fn check_mfb(seed: u64, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (c, m, rank, out) = (5, 4, 2, 3);
    let batch = 2;
    let p = MfbParams::init(c, m, rank, out, &mut rng);
    let l = random_matrix(batch, c, &mut rng);
    let a = random_matrix(batch, m, &mut rng);
    let g = random_matrix(batch, out, &mut rng);

    let mut worst: f64 = 0.0;
    for (train, dropout, mask_seed) in [(false, 0.0, 0), (true, 0.3, seed ^ 0x5EED)] {
        let forward = |l: &Matrix, a: &Matrix, p: &MfbParams| {
            mfb_forward(l, a, p, dropout, &mut Rng::new(mask_seed), train)
        };
        let (_, cache) = forward(&l, &a, &p)?;
        let grads = mfb_backward(&g, &cache, &p)?;
        let mut analytic = vec![
            grads.visual,
            grads.audio,
            grads.visual_factors,
            grads.audio_factors,
        ];
        maybe_perturb(&mut analytic, perturb);
        let params = vec![
            l.clone(),
            a.clone(),
            p.visual_factors.clone(),
            p.audio_factors.clone(),
        ];
        let mut f = |xs: &[Matrix]| {
            let pp = MfbParams {
                visual_factors: xs[2].clone(),
                audio_factors: xs[3].clone(),
                rank,
                out_dim: out,
            };
            let (out, _) = forward(&xs[0], &xs[1], &pp).expect("forward in fd");
            out.frob_dot(&g)
        };
        worst = worst.max(compare_fd(&mut f, &params, &analytic));
    }
    Ok(worst)
}

fn check_fc_concat(seed: u64, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (c, m, rank, out) = (4, 3, 2, 2);
    let p = FcConcatParams::init(c, m, rank, out, &mut rng);
    let l = random_matrix(2, c, &mut rng);
    let a = random_matrix(2, m, &mut rng);
    let g = random_matrix(2, 2 * rank * out, &mut rng);

    let (_, cache) = fc_concat_forward(&l, &a, &p)?;
    let grads = fc_concat_backward(&g, &cache, &p)?;
    let mut analytic = vec![grads.visual, grads.audio, grads.visual_proj, grads.audio_proj];
    maybe_perturb(&mut analytic, perturb);
    let params = vec![l, a, p.visual_proj.clone(), p.audio_proj.clone()];
    let mut f = |xs: &[Matrix]| {
        let pp = FcConcatParams {
            visual_proj: xs[2].clone(),
            audio_proj: xs[3].clone(),
        };
        let (out, _) = fc_concat_forward(&xs[0], &xs[1], &pp).expect("forward in fd");
        out.frob_dot(&g)
    };
    Ok(compare_fd(&mut f, &params, &analytic))
}

fn check_avgpool(seed: u64, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let frames = random_matrix(4, 5, &mut rng);
    let g = random_matrix(1, 5, &mut rng);
    let mut analytic = vec![avgpool_backward(&g, 4)];
    maybe_perturb(&mut analytic, perturb);
    let mut f = |xs: &[Matrix]| avgpool(&xs[0]).expect("forward in fd").frob_dot(&g);
    Ok(compare_fd(&mut f, &[frames], &analytic))
}

fn check_dbof(seed: u64, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (d, proj) = (4, 6);
    let mut p = DbofParams::init(d, proj, 0.1, &mut rng);
    // Non-trivial frozen statistics for the eval-mode path.
    p.bn_running_mean = random_matrix(1, proj, &mut rng).scale(0.3);
    p.bn_running_var = random_matrix(1, proj, &mut rng).map(|v| 0.5 + v.abs());
    let frames = random_matrix(3, d, &mut rng);
    let g = random_matrix(1, proj, &mut rng);

    let mut worst: f64 = 0.0;
    for train in [false, true] {
        let (_, cache) = dbof_forward(&frames, &p, train)?;
        let grads = dbof_backward(&g, &cache, &p)?;
        let mut analytic = vec![
            grads.frames,
            grads.proj_weights,
            grads.proj_bias,
            grads.bn_gamma,
            grads.bn_beta,
        ];
        maybe_perturb(&mut analytic, perturb);
        let params = vec![
            frames.clone(),
            p.proj_weights.clone(),
            p.proj_bias.clone(),
            p.bn_gamma.clone(),
            p.bn_beta.clone(),
        ];
        let mut f = |xs: &[Matrix]| {
            let pp = DbofParams {
                proj_weights: xs[1].clone(),
                proj_bias: xs[2].clone(),
                bn_gamma: xs[3].clone(),
                bn_beta: xs[4].clone(),
                bn_running_mean: p.bn_running_mean.clone(),
                bn_running_var: p.bn_running_var.clone(),
                bn_momentum: p.bn_momentum,
            };
            let (out, _) = dbof_forward(&xs[0], &pp, train).expect("forward in fd");
            out.frob_dot(&g)
        };
        worst = worst.max(compare_fd(&mut f, &params, &analytic));
    }
    Ok(worst)
}

fn check_netvlad(seed: u64, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (d, k) = (4, 3);
    let p = NetVladParams::init(d, k, &mut rng);
    let frames = random_matrix(3, d, &mut rng);
    let g = random_matrix(1, k * d, &mut rng);

    let (_, cache) = netvlad_forward(&frames, &p)?;
    let grads = netvlad_backward(&g, &cache, &p)?;
    let mut analytic = vec![
        grads.frames,
        grads.assign_weights,
        grads.assign_bias,
        grads.centers,
    ];
    maybe_perturb(&mut analytic, perturb);
    let params = vec![
        frames,
        p.assign_weights.clone(),
        p.assign_bias.clone(),
        p.centers.clone(),
    ];
    let mut f = |xs: &[Matrix]| {
        let pp = NetVladParams {
            assign_weights: xs[1].clone(),
            assign_bias: xs[2].clone(),
            centers: xs[3].clone(),
        };
        let (out, _) = netvlad_forward(&xs[0], &pp).expect("forward in fd");
        out.frob_dot(&g)
    };
    Ok(compare_fd(&mut f, &params, &analytic))
}

fn check_moe(seed: u64, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (features, classes, mixtures) = (4, 3, 2);
    let p = MoeParams::init(features, classes, mixtures, 0.0, &mut rng);
    let input = random_matrix(2, features, &mut rng);
    let g = random_matrix(2, classes, &mut rng);

    let (_, cache) = moe_forward(&input, &p)?;
    let grads = moe_backward(&g, &cache, &p)?;
    let mut analytic = vec![grads.input, grads.gate_weights, grads.expert_weights];
    maybe_perturb(&mut analytic, perturb);
    let params = vec![input, p.gate_weights.clone(), p.expert_weights.clone()];
    let mut f = |xs: &[Matrix]| {
        let pp = MoeParams {
            gate_weights: xs[1].clone(),
            expert_weights: xs[2].clone(),
            mixtures,
            classes,
            l2_lambda: 0.0,
        };
        let (out, _) = moe_forward(&xs[0], &pp).expect("forward in fd");
        out.frob_dot(&g)
    };
    Ok(compare_fd(&mut f, &params, &analytic))
}

fn check_bce(seed: u64, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (b, c) = (3, 4);
    // Keep confidences inside the clamp interval so the loss is smooth.
    let d = Matrix::from_vec(b, c, (0..b * c).map(|_| rng.uniform(0.05, 0.95)).collect())?;
    let labels = Matrix::from_vec(
        b,
        c,
        (0..b * c).map(|_| (rng.below(2)) as f64).collect(),
    )?;
    let (_, grad) = bce_loss(&d, &labels)?;
    let mut analytic = vec![grad];
    maybe_perturb(&mut analytic, perturb);
    let mut f = |xs: &[Matrix]| bce_loss(&xs[0], &labels).expect("loss in fd").0;
    Ok(compare_fd(&mut f, &[d], &analytic))
}

/// Composes aggregation, fusion, classifier, and loss on a tiny model and
/// checks the gradient of every trainable block.
fn check_end_to_end(seed: u64, agg: AggKind, perturb: bool) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let cfg = RunConfig {
        agg_kind: agg,
        fusion_kind: FusionKind::Mfb,
        fusion_rank: 2,
        fusion_out: 8,
        fusion_dropout: 0.0,
        agg_clusters: 2,
        agg_dbof_dim: 6,
        moe_l2: 0.0,
        ..RunConfig::default()
    };
    let spec = ModelSpec::from_config(&cfg, Modality::Both, 4, 4, 3);
    let model = Model::init(spec, derive_seed(seed, 0xE2E));

    let batch = Batch {
        visual: (0..2).map(|_| random_matrix(3, 4, &mut rng)).collect(),
        audio: (0..2).map(|_| random_matrix(3, 4, &mut rng)).collect(),
        labels: Matrix::from_vec(2, 3, (0..6).map(|_| rng.below(2) as f64).collect())?,
        indices: vec![0, 1],
    };

    let (d, cache) = model.forward(&batch, false, &mut Rng::new(0))?;
    let (_, grad_d) = bce_loss(&d, &batch.labels)?;
    let grads = model.backward(&grad_d, &cache)?;
    let mut analytic: Vec<Matrix> = grads.blocks().into_iter().cloned().collect();
    maybe_perturb(&mut analytic, perturb);
    let params: Vec<Matrix> = model.trainable().into_iter().cloned().collect();
    let mut f = |xs: &[Matrix]| {
        let mut m = model.clone();
        for (dst, src) in m.trainable_mut().into_iter().zip(xs) {
            *dst = src.clone();
        }
        let (d, _) = m.forward(&batch, false, &mut Rng::new(0)).expect("forward in fd");
        bce_loss(&d, &batch.labels).expect("loss in fd").0
    };
    Ok(compare_fd(&mut f, &params, &analytic))
}

/// Runs every operator check over `rounds` seeds derived from `base_seed`,
/// reporting the worst relative error seen per operator. `perturb` names an
/// operator whose analytic gradient is deliberately corrupted (a hook for
/// testing that the suite detects failures).
pub fn run_suite(base_seed: u64, rounds: u64, perturb: Option<&str>) -> Result<Vec<GradCheck>> {
    type CheckFn = fn(u64, bool) -> Result<f64>;
    let checks: Vec<(&'static str, f64, CheckFn)> = vec![
        ("mfb", DEFAULT_TOL, check_mfb as CheckFn),
        ("fc_concat", DEFAULT_TOL, check_fc_concat),
        ("avgpool", DEFAULT_TOL, check_avgpool),
        ("dbof", DEFAULT_TOL, check_dbof),
        ("netvlad", DEFAULT_TOL, check_netvlad),
        ("moe", DEFAULT_TOL, check_moe),
        ("bce_loss", LOSS_TOL, check_bce),
        ("end_to_end_avg", DEFAULT_TOL, |s, p| {
            check_end_to_end(s, AggKind::Avg, p)
        }),
        ("end_to_end_dbof", DEFAULT_TOL, |s, p| {
            check_end_to_end(s, AggKind::Dbof, p)
        }),
        ("end_to_end_netvlad", DEFAULT_TOL, |s, p| {
            check_end_to_end(s, AggKind::NetVlad, p)
        }),
    ];

    let mut reports = Vec::with_capacity(checks.len());
    for (name, tolerance, check) in checks {
        let corrupted = perturb == Some(name);
        let mut max_rel_err: f64 = 0.0;
        for round in 0..rounds {
            let seed = derive_seed(base_seed, round);
            max_rel_err = max_rel_err.max(check(seed, corrupted)?);
        }
        reports.push(GradCheck {
            name,
            max_rel_err,
            tolerance,
        });
    }
    Ok(reports)
}
