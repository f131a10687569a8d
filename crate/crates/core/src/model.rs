//! The end-to-end model: per-modality temporal aggregation, fusion, and the
//! mixture-of-experts classifier, with a batched forward/backward pair and
//! checkpoint save/load.

use std::path::Path;

use crate::aggregation::{
    avgpool, dbof_backward, dbof_forward, dbof_update_running_stats, netvlad_backward,
    netvlad_forward, DbofCache, DbofParams, NetVladCache, NetVladParams,
};
use crate::checkpoint::{load_blocks, save_blocks};
use crate::config::{AggKind, FusionKind, RunConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::fusion::{
    concat_backward, concat_forward, fc_concat_backward, fc_concat_forward, mfb_backward,
    mfb_forward, FcConcatCache, FcConcatParams, MfbCache, MfbParams,
};
use crate::matrix::Matrix;
use crate::moe::{moe_backward, moe_forward, moe_l2_grads, moe_l2_penalty, MoeCache, MoeParams};
use crate::rng::Rng;

/// Which modalities feed the classifier. Single-modality models bypass
/// fusion and give the aggregated feature straight to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Both,
    VideoOnly,
    AudioOnly,
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::VideoOnly => "video_only",
            Modality::AudioOnly => "audio_only",
        }
    }
}

/// Everything needed to build (or rebuild) a model's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub modality: Modality,
    pub agg: AggKind,
    pub fusion: FusionKind,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub classes: usize,
    pub fusion_rank: usize,
    pub fusion_out: usize,
    pub dropout: f64,
    pub clusters: usize,
    pub dbof_visual_dim: usize,
    pub dbof_audio_dim: usize,
    pub bn_momentum: f64,
    pub mixtures: usize,
    pub l2_lambda: f64,
}

impl ModelSpec {
    pub fn from_config(
        cfg: &RunConfig,
        modality: Modality,
        visual_dim: usize,
        audio_dim: usize,
        classes: usize,
    ) -> Self {
        ModelSpec {
            modality,
            agg: cfg.agg_kind,
            fusion: cfg.fusion_kind,
            visual_dim,
            audio_dim,
            classes,
            fusion_rank: cfg.fusion_rank,
            fusion_out: cfg.fusion_out,
            dropout: cfg.fusion_dropout,
            clusters: cfg.agg_clusters,
            dbof_visual_dim: cfg.agg_dbof_dim,
            dbof_audio_dim: cfg.dbof_audio_dim(visual_dim, audio_dim),
            bn_momentum: 0.1,
            mixtures: cfg.moe_mixtures,
            l2_lambda: cfg.moe_l2,
        }
    }

    /// Width of one aggregated modality.
    fn aggregated_dim(&self, input_dim: usize, dbof_dim: usize) -> usize {
        match self.agg {
            AggKind::Avg => input_dim,
            AggKind::Dbof => dbof_dim,
            AggKind::NetVlad => self.clusters * input_dim,
        }
    }

    pub fn aggregated_visual_dim(&self) -> usize {
        self.aggregated_dim(self.visual_dim, self.dbof_visual_dim)
    }

    pub fn aggregated_audio_dim(&self) -> usize {
        self.aggregated_dim(self.audio_dim, self.dbof_audio_dim)
    }

    /// Width of the classifier input.
    pub fn fused_dim(&self) -> usize {
        match self.modality {
            Modality::VideoOnly => self.aggregated_visual_dim(),
            Modality::AudioOnly => self.aggregated_audio_dim(),
            Modality::Both => match self.fusion {
                FusionKind::Mfb => self.fusion_out,
                FusionKind::Concat => self.aggregated_visual_dim() + self.aggregated_audio_dim(),
                FusionKind::FcConcat => 2 * self.fusion_rank * self.fusion_out,
            },
        }
    }
}

/// Aggregator parameters for one modality.
#[derive(Debug, Clone)]
pub enum AggParams {
    Avg,
    Dbof(DbofParams),
    NetVlad(NetVladParams),
}

impl AggParams {
    fn init(spec: &ModelSpec, input_dim: usize, dbof_dim: usize, rng: &mut Rng) -> AggParams {
        match spec.agg {
            AggKind::Avg => AggParams::Avg,
            AggKind::Dbof => {
                AggParams::Dbof(DbofParams::init(input_dim, dbof_dim, spec.bn_momentum, rng))
            }
            AggKind::NetVlad => {
                AggParams::NetVlad(NetVladParams::init(input_dim, spec.clusters, rng))
            }
        }
    }
}

/// Per-video aggregation cache.
#[derive(Debug, Clone)]
pub enum AggCache {
    Avg { frames: usize },
    Dbof(DbofCache),
    NetVlad(NetVladCache),
}

/// Accumulated aggregator gradients for one modality.
#[derive(Debug, Clone)]
pub enum AggGrads {
    Avg,
    Dbof {
        proj_weights: Matrix,
        proj_bias: Matrix,
        bn_gamma: Matrix,
        bn_beta: Matrix,
    },
    NetVlad {
        assign_weights: Matrix,
        assign_bias: Matrix,
        centers: Matrix,
    },
}

impl AggGrads {
    fn zeros_like(p: &AggParams) -> AggGrads {
        match p {
            AggParams::Avg => AggGrads::Avg,
            AggParams::Dbof(d) => AggGrads::Dbof {
                proj_weights: Matrix::zeros(d.proj_weights.rows(), d.proj_weights.cols()),
                proj_bias: Matrix::zeros(1, d.proj_dim()),
                bn_gamma: Matrix::zeros(1, d.proj_dim()),
                bn_beta: Matrix::zeros(1, d.proj_dim()),
            },
            AggParams::NetVlad(n) => AggGrads::NetVlad {
                assign_weights: Matrix::zeros(n.assign_weights.rows(), n.assign_weights.cols()),
                assign_bias: Matrix::zeros(1, n.clusters()),
                centers: Matrix::zeros(n.centers.rows(), n.centers.cols()),
            },
        }
    }
}

#[derive(Debug, Clone)]
enum FusionCache {
    Mfb(Box<MfbCache>),
    Concat { visual_cols: usize },
    FcConcat(FcConcatCache),
    Single,
}

/// Caches from one forward pass, consumed by [`Model::backward`] and (for
/// DBoF training) [`Model::apply_bn_updates`].
#[derive(Debug, Clone)]
pub struct ModelCache {
    visual_caches: Vec<AggCache>,
    audio_caches: Vec<AggCache>,
    fusion_cache: FusionCache,
    moe_cache: MoeCache,
}

/// Gradients for every trainable block, aligned with [`Model::trainable`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub visual_agg: AggGrads,
    pub audio_agg: AggGrads,
    pub fusion_blocks: Vec<Matrix>,
    pub moe_gate: Matrix,
    pub moe_expert: Matrix,
}

impl ModelGrads {
    /// Blocks in the canonical trainable order.
    pub fn blocks(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for agg in [&self.visual_agg, &self.audio_agg] {
            match agg {
                AggGrads::Avg => {}
                AggGrads::Dbof {
                    proj_weights,
                    proj_bias,
                    bn_gamma,
                    bn_beta,
                } => out.extend([proj_weights, proj_bias, bn_gamma, bn_beta]),
                AggGrads::NetVlad {
                    assign_weights,
                    assign_bias,
                    centers,
                } => out.extend([assign_weights, assign_bias, centers]),
            }
        }
        out.extend(self.fusion_blocks.iter());
        out.push(&self.moe_gate);
        out.push(&self.moe_expert);
        out
    }
}

#[derive(Debug, Clone)]
pub enum FusionParams {
    Mfb(MfbParams),
    Concat,
    FcConcat(FcConcatParams),
    /// Single-modality models have no fusion stage.
    None,
}

/// A fully parameterized model.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub visual_agg: AggParams,
    pub audio_agg: AggParams,
    pub fusion: FusionParams,
    pub moe: MoeParams,
}

impl Model {
    /// Deterministically initializes all parameters from `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Model {
        let mut rng = Rng::new(seed);
        let visual_agg = if spec.modality == Modality::AudioOnly {
            AggParams::Avg // unused tower carries no parameters
        } else {
            AggParams::init(&spec, spec.visual_dim, spec.dbof_visual_dim, &mut rng)
        };
        let audio_agg = if spec.modality == Modality::VideoOnly {
            AggParams::Avg
        } else {
            AggParams::init(&spec, spec.audio_dim, spec.dbof_audio_dim, &mut rng)
        };
        let fusion = if spec.modality != Modality::Both {
            FusionParams::None
        } else {
            match spec.fusion {
                FusionKind::Mfb => FusionParams::Mfb(MfbParams::init(
                    spec.aggregated_visual_dim(),
                    spec.aggregated_audio_dim(),
                    spec.fusion_rank,
                    spec.fusion_out,
                    &mut rng,
                )),
                FusionKind::Concat => FusionParams::Concat,
                FusionKind::FcConcat => FusionParams::FcConcat(FcConcatParams::init(
                    spec.aggregated_visual_dim(),
                    spec.aggregated_audio_dim(),
                    spec.fusion_rank,
                    spec.fusion_out,
                    &mut rng,
                )),
            }
        };
        let moe = MoeParams::init(
            spec.fused_dim(),
            spec.classes,
            spec.mixtures,
            spec.l2_lambda,
            &mut rng,
        );
        Model {
            spec,
            visual_agg,
            audio_agg,
            fusion,
            moe,
        }
    }

    fn uses_visual(&self) -> bool {
        self.spec.modality != Modality::AudioOnly
    }

    fn uses_audio(&self) -> bool {
        self.spec.modality != Modality::VideoOnly
    }

    /// Aggregates each video of one modality and stacks the rows.
    fn aggregate_modality(
        params: &AggParams,
        videos: &[Matrix],
        train: bool,
    ) -> Result<(Matrix, Vec<AggCache>)> {
        let mut caches = Vec::with_capacity(videos.len());
        let mut rows: Option<Matrix> = None;
        for (i, frames) in videos.iter().enumerate() {
            let (row, cache) = match params {
                AggParams::Avg => (
                    avgpool(frames)?,
                    AggCache::Avg {
                        frames: frames.rows(),
                    },
                ),
                AggParams::Dbof(p) => {
                    let (row, cache) = dbof_forward(frames, p, train)?;
                    (row, AggCache::Dbof(cache))
                }
                AggParams::NetVlad(p) => {
                    let (row, cache) = netvlad_forward(frames, p)?;
                    (row, AggCache::NetVlad(cache))
                }
            };
            let stacked = rows.get_or_insert_with(|| Matrix::zeros(videos.len(), row.cols()));
            stacked.row_mut(i).copy_from_slice(row.row(0));
            caches.push(cache);
        }
        Ok((rows.expect("non-empty batch"), caches))
    }

    /// Forward pass over one batch. `rng` only feeds dropout, which is only
    /// drawn in train mode. Running BN statistics are not touched here; in
    /// train mode follow up with [`Model::apply_bn_updates`].
    pub fn forward(&self, batch: &Batch, train: bool, rng: &mut Rng) -> Result<(Matrix, ModelCache)> {
        if batch.size() == 0 {
            return Err(Error::InvalidArg("empty batch".into()));
        }
        let (visual_feats, visual_caches) = if self.uses_visual() {
            let (m, c) = Self::aggregate_modality(&self.visual_agg, &batch.visual, train)?;
            (Some(m), c)
        } else {
            (None, Vec::new())
        };
        let (audio_feats, audio_caches) = if self.uses_audio() {
            let (m, c) = Self::aggregate_modality(&self.audio_agg, &batch.audio, train)?;
            (Some(m), c)
        } else {
            (None, Vec::new())
        };

        let (fused, fusion_cache) = match self.spec.modality {
            Modality::VideoOnly => (visual_feats.expect("visual tower active"), FusionCache::Single),
            Modality::AudioOnly => (audio_feats.expect("audio tower active"), FusionCache::Single),
            Modality::Both => {
                let v = visual_feats.expect("visual tower active");
                let a = audio_feats.expect("audio tower active");
                match &self.fusion {
                    FusionParams::Mfb(p) => {
                        let (f, c) = mfb_forward(&v, &a, p, self.spec.dropout, rng, train)?;
                        (f, FusionCache::Mfb(Box::new(c)))
                    }
                    FusionParams::Concat => {
                        let visual_cols = v.cols();
                        (concat_forward(&v, &a)?, FusionCache::Concat { visual_cols })
                    }
                    FusionParams::FcConcat(p) => {
                        let (f, c) = fc_concat_forward(&v, &a, p)?;
                        (f, FusionCache::FcConcat(c))
                    }
                    FusionParams::None => {
                        return Err(Error::shape("model", "fusion parameters missing"))
                    }
                }
            }
        };

        let (confidences, moe_cache) = moe_forward(&fused, &self.moe)?;
        Ok((
            confidences,
            ModelCache {
                visual_caches,
                audio_caches,
                fusion_cache,
                moe_cache,
            },
        ))
    }

    /// Folds cached DBoF batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, cache: &ModelCache) {
        if let AggParams::Dbof(p) = &mut self.visual_agg {
            for c in &cache.visual_caches {
                if let AggCache::Dbof(dc) = c {
                    dbof_update_running_stats(p, dc);
                }
            }
        }
        if let AggParams::Dbof(p) = &mut self.audio_agg {
            for c in &cache.audio_caches {
                if let AggCache::Dbof(dc) = c {
                    dbof_update_running_stats(p, dc);
                }
            }
        }
    }

    fn aggregate_backward(
        params: &AggParams,
        grads: &mut AggGrads,
        feat_grads: &Matrix,
        caches: &[AggCache],
    ) -> Result<()> {
        for (i, cache) in caches.iter().enumerate() {
            let row = feat_grads.single_row(i);
            match (params, cache, &mut *grads) {
                (AggParams::Avg, AggCache::Avg { .. }, AggGrads::Avg) => {
                    // Inputs are data; the frame gradient is not retained.
                }
                (AggParams::Dbof(p), AggCache::Dbof(c), AggGrads::Dbof {
                    proj_weights,
                    proj_bias,
                    bn_gamma,
                    bn_beta,
                }) => {
                    let g = dbof_backward(&row, c, p)?;
                    proj_weights.add_assign(&g.proj_weights);
                    proj_bias.add_assign(&g.proj_bias);
                    bn_gamma.add_assign(&g.bn_gamma);
                    bn_beta.add_assign(&g.bn_beta);
                }
                (AggParams::NetVlad(p), AggCache::NetVlad(c), AggGrads::NetVlad {
                    assign_weights,
                    assign_bias,
                    centers,
                }) => {
                    let g = netvlad_backward(&row, c, p)?;
                    assign_weights.add_assign(&g.assign_weights);
                    assign_bias.add_assign(&g.assign_bias);
                    centers.add_assign(&g.centers);
                }
                _ => {
                    return Err(Error::shape(
                        "model_backward",
                        "aggregator cache does not match parameters",
                    ))
                }
            }
        }
        Ok(())
    }

    /// Reverse-mode pass; gradients for the frame inputs are discarded.
    pub fn backward(&self, grad_d: &Matrix, cache: &ModelCache) -> Result<ModelGrads> {
        let moe_grads = moe_backward(grad_d, &cache.moe_cache, &self.moe)?;
        let grad_fused = moe_grads.input;

        let mut visual_agg_grads = AggGrads::zeros_like(&self.visual_agg);
        let mut audio_agg_grads = AggGrads::zeros_like(&self.audio_agg);
        let mut fusion_blocks = Vec::new();

        let (grad_visual, grad_audio) = match (&self.fusion, &cache.fusion_cache) {
            (_, FusionCache::Single) => match self.spec.modality {
                Modality::VideoOnly => (Some(grad_fused), None),
                Modality::AudioOnly => (None, Some(grad_fused)),
                Modality::Both => {
                    return Err(Error::shape(
                        "model_backward",
                        "single-modality cache on a fused model",
                    ))
                }
            },
            (FusionParams::Mfb(p), FusionCache::Mfb(c)) => {
                let g = mfb_backward(&grad_fused, c, p)?;
                fusion_blocks.push(g.visual_factors);
                fusion_blocks.push(g.audio_factors);
                (Some(g.visual), Some(g.audio))
            }
            (FusionParams::Concat, FusionCache::Concat { visual_cols }) => {
                let (gv, ga) = concat_backward(&grad_fused, *visual_cols);
                (Some(gv), Some(ga))
            }
            (FusionParams::FcConcat(p), FusionCache::FcConcat(c)) => {
                let g = fc_concat_backward(&grad_fused, c, p)?;
                fusion_blocks.push(g.visual_proj);
                fusion_blocks.push(g.audio_proj);
                (Some(g.visual), Some(g.audio))
            }
            _ => {
                return Err(Error::shape(
                    "model_backward",
                    "fusion cache does not match parameters",
                ))
            }
        };

        if let Some(gv) = grad_visual {
            Self::aggregate_backward(&self.visual_agg, &mut visual_agg_grads, &gv, &cache.visual_caches)?;
        }
        if let Some(ga) = grad_audio {
            Self::aggregate_backward(&self.audio_agg, &mut audio_agg_grads, &ga, &cache.audio_caches)?;
        }

        Ok(ModelGrads {
            visual_agg: visual_agg_grads,
            audio_agg: audio_agg_grads,
            fusion_blocks,
            moe_gate: moe_grads.gate_weights,
            moe_expert: moe_grads.expert_weights,
        })
    }

    /// L2 penalty on the classifier weights, added to the training loss.
    pub fn l2_penalty(&self) -> f64 {
        moe_l2_penalty(&self.moe)
    }

    /// Adds the L2 penalty gradient (`2 * lambda * W`) to the classifier blocks.
    pub fn add_l2_grads(&self, grads: &mut ModelGrads) {
        if self.moe.l2_lambda > 0.0 {
            let (g, e) = moe_l2_grads(&self.moe);
            grads.moe_gate.add_assign(&g);
            grads.moe_expert.add_assign(&e);
        }
    }

    fn agg_block_names(prefix: &str, p: &AggParams, include_state: bool) -> Vec<String> {
        match p {
            AggParams::Avg => vec![],
            AggParams::Dbof(_) => {
                let mut names: Vec<String> = ["proj_weights", "proj_bias", "bn_gamma", "bn_beta"]
                    .iter()
                    .map(|s| format!("{prefix}.{s}"))
                    .collect();
                if include_state {
                    names.push(format!("{prefix}.bn_running_mean"));
                    names.push(format!("{prefix}.bn_running_var"));
                }
                names
            }
            AggParams::NetVlad(_) => ["assign_weights", "assign_bias", "centers"]
                .iter()
                .map(|s| format!("{prefix}.{s}"))
                .collect(),
        }
    }

    /// Names of the trainable blocks, aligned with [`Model::trainable`].
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Self::agg_block_names("agg.visual", &self.visual_agg, false);
        names.extend(Self::agg_block_names("agg.audio", &self.audio_agg, false));
        match &self.fusion {
            FusionParams::Mfb(_) => {
                names.push("fusion.visual_factors".into());
                names.push("fusion.audio_factors".into());
            }
            FusionParams::FcConcat(_) => {
                names.push("fusion.visual_proj".into());
                names.push("fusion.audio_proj".into());
            }
            FusionParams::Concat | FusionParams::None => {}
        }
        names.push("moe.gate_weights".into());
        names.push("moe.expert_weights".into());
        names
    }

    /// Trainable blocks in canonical order (excludes BN running statistics).
    pub fn trainable(&self) -> Vec<&Matrix> {
        let mut blocks = Vec::new();
        for agg in [&self.visual_agg, &self.audio_agg] {
            match agg {
                AggParams::Avg => {}
                AggParams::Dbof(d) => {
                    blocks.extend([&d.proj_weights, &d.proj_bias, &d.bn_gamma, &d.bn_beta])
                }
                AggParams::NetVlad(n) => {
                    blocks.extend([&n.assign_weights, &n.assign_bias, &n.centers])
                }
            }
        }
        match &self.fusion {
            FusionParams::Mfb(p) => blocks.extend([&p.visual_factors, &p.audio_factors]),
            FusionParams::FcConcat(p) => blocks.extend([&p.visual_proj, &p.audio_proj]),
            FusionParams::Concat | FusionParams::None => {}
        }
        blocks.push(&self.moe.gate_weights);
        blocks.push(&self.moe.expert_weights);
        blocks
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut blocks: Vec<&mut Matrix> = Vec::new();
        for agg in [&mut self.visual_agg, &mut self.audio_agg] {
            match agg {
                AggParams::Avg => {}
                AggParams::Dbof(d) => blocks.extend([
                    &mut d.proj_weights,
                    &mut d.proj_bias,
                    &mut d.bn_gamma,
                    &mut d.bn_beta,
                ]),
                AggParams::NetVlad(n) => blocks.extend([
                    &mut n.assign_weights,
                    &mut n.assign_bias,
                    &mut n.centers,
                ]),
            }
        }
        match &mut self.fusion {
            FusionParams::Mfb(p) => blocks.extend([&mut p.visual_factors, &mut p.audio_factors]),
            FusionParams::FcConcat(p) => blocks.extend([&mut p.visual_proj, &mut p.audio_proj]),
            FusionParams::Concat | FusionParams::None => {}
        }
        blocks.push(&mut self.moe.gate_weights);
        blocks.push(&mut self.moe.expert_weights);
        blocks
    }

    /// All checkpointed blocks: trainables plus BN running statistics.
    fn state_blocks(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = self
            .trainable_names()
            .into_iter()
            .zip(self.trainable())
            .collect();
        for (prefix, agg) in [("agg.visual", &self.visual_agg), ("agg.audio", &self.audio_agg)] {
            if let AggParams::Dbof(d) = agg {
                out.push((format!("{prefix}.bn_running_mean"), &d.bn_running_mean));
                out.push((format!("{prefix}.bn_running_var"), &d.bn_running_var));
            }
        }
        out
    }

    fn meta_row(&self) -> Matrix {
        let s = &self.spec;
        let modality = match s.modality {
            Modality::Both => 0.0,
            Modality::VideoOnly => 1.0,
            Modality::AudioOnly => 2.0,
        };
        let agg = match s.agg {
            AggKind::Avg => 0.0,
            AggKind::Dbof => 1.0,
            AggKind::NetVlad => 2.0,
        };
        let fusion = match s.fusion {
            FusionKind::Mfb => 0.0,
            FusionKind::Concat => 1.0,
            FusionKind::FcConcat => 2.0,
        };
        Matrix::row_vector(&[
            modality,
            agg,
            fusion,
            s.visual_dim as f64,
            s.audio_dim as f64,
            s.classes as f64,
            s.fusion_rank as f64,
            s.fusion_out as f64,
            s.dropout,
            s.clusters as f64,
            s.dbof_visual_dim as f64,
            s.dbof_audio_dim as f64,
            s.bn_momentum,
            s.mixtures as f64,
            s.l2_lambda,
        ])
    }

    fn spec_from_meta(meta: &Matrix) -> Result<ModelSpec> {
        if meta.rows() != 1 || meta.cols() != 15 {
            return Err(Error::Checkpoint(format!(
                "meta block is {}x{}, expected 1x15",
                meta.rows(),
                meta.cols()
            )));
        }
        let at = |i: usize| meta.get(0, i);
        let modality = match at(0) as i64 {
            0 => Modality::Both,
            1 => Modality::VideoOnly,
            2 => Modality::AudioOnly,
            v => return Err(Error::Checkpoint(format!("unknown modality code {v}"))),
        };
        let agg = match at(1) as i64 {
            0 => AggKind::Avg,
            1 => AggKind::Dbof,
            2 => AggKind::NetVlad,
            v => return Err(Error::Checkpoint(format!("unknown aggregator code {v}"))),
        };
        let fusion = match at(2) as i64 {
            0 => FusionKind::Mfb,
            1 => FusionKind::Concat,
            2 => FusionKind::FcConcat,
            v => return Err(Error::Checkpoint(format!("unknown fusion code {v}"))),
        };
        Ok(ModelSpec {
            modality,
            agg,
            fusion,
            visual_dim: at(3) as usize,
            audio_dim: at(4) as usize,
            classes: at(5) as usize,
            fusion_rank: at(6) as usize,
            fusion_out: at(7) as usize,
            dropout: at(8),
            clusters: at(9) as usize,
            dbof_visual_dim: at(10) as usize,
            dbof_audio_dim: at(11) as usize,
            bn_momentum: at(12),
            mixtures: at(13) as usize,
            l2_lambda: at(14),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = self.meta_row();
        let mut blocks: Vec<(String, &Matrix)> = vec![("__meta__".to_string(), &meta)];
        blocks.extend(self.state_blocks());
        save_blocks(path, &blocks)
    }

    /// Rebuilds a model from a checkpoint, verifying that every expected
    /// block is present with the right shape.
    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let blocks = load_blocks(path)?;
        let meta = blocks
            .iter()
            .find(|(name, _)| name == "__meta__")
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Checkpoint("missing __meta__ block".to_string()))?;
        let spec = Self::spec_from_meta(meta)?;
        // Seed is irrelevant: every block is overwritten below.
        let mut model = Model::init(spec, 0);

        let expected: Vec<(String, Matrix)> = model
            .state_blocks()
            .into_iter()
            .map(|(n, m)| (n, m.clone()))
            .collect();
        if blocks.len() != expected.len() + 1 {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} blocks, model expects {}",
                blocks.len(),
                expected.len() + 1
            )));
        }
        for (name, want) in &expected {
            let found = blocks
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
            if found.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` is {}x{}, model expects {}x{}",
                    found.rows(),
                    found.cols(),
                    want.rows(),
                    want.cols()
                )));
            }
        }
        // Write the loaded data into the model in place.
        for (name, data) in &blocks {
            if name == "__meta__" {
                continue;
            }
            model.write_block(name, data)?;
        }
        Ok(model)
    }

    fn write_block(&mut self, name: &str, data: &Matrix) -> Result<()> {
        let names = self.trainable_names();
        if let Some(pos) = names.iter().position(|n| n == name) {
            *self.trainable_mut()[pos] = data.clone();
            return Ok(());
        }
        for (prefix, agg) in [
            ("agg.visual", &mut self.visual_agg),
            ("agg.audio", &mut self.audio_agg),
        ] {
            if let AggParams::Dbof(d) = agg {
                if name == format!("{prefix}.bn_running_mean") {
                    d.bn_running_mean = data.clone();
                    return Ok(());
                }
                if name == format!("{prefix}.bn_running_var") {
                    d.bn_running_var = data.clone();
                    return Ok(());
                }
            }
        }
        Err(Error::Checkpoint(format!("unexpected block `{name}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_batch(agg_frames: usize) -> (Batch, usize, usize, usize) {
        let spec = SyntheticSpec {
            videos: 4,
            classes: 3,
            visual_dim: 6,
            audio_dim: 4,
            frames_min: 3,
            frames_max: 5,
            seed: 5,
            ..SyntheticSpec::default()
        };
        let ds = generate_synthetic(&spec).unwrap();
        let batch = crate::data::batches(&ds, 4, agg_frames, Rng::new(1)).next().unwrap();
        (batch, 6, 4, 3)
    }

    fn spec_for(
        modality: Modality,
        agg: AggKind,
        fusion: FusionKind,
        visual_dim: usize,
        audio_dim: usize,
        classes: usize,
    ) -> ModelSpec {
        let cfg = RunConfig {
            agg_kind: agg,
            fusion_kind: fusion,
            fusion_rank: 2,
            fusion_out: 5,
            agg_clusters: 2,
            agg_dbof_dim: 8,
            ..RunConfig::default()
        };
        ModelSpec::from_config(&cfg, modality, visual_dim, audio_dim, classes)
    }

    #[test]
    fn forward_shapes_for_all_variants() {
        let (batch, c, m, classes) = tiny_batch(4);
        for agg in [AggKind::Avg, AggKind::Dbof, AggKind::NetVlad] {
            for (modality, fusion) in [
                (Modality::Both, FusionKind::Mfb),
                (Modality::Both, FusionKind::Concat),
                (Modality::Both, FusionKind::FcConcat),
                (Modality::VideoOnly, FusionKind::Mfb),
                (Modality::AudioOnly, FusionKind::Mfb),
            ] {
                let spec = spec_for(modality, agg, fusion, c, m, classes);
                let model = Model::init(spec, 3);
                let (d, cache) = model.forward(&batch, false, &mut Rng::new(9)).unwrap();
                assert_eq!(d.shape(), (4, classes));
                assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
                let grads = model.backward(&Matrix::filled(4, classes, 0.1), &cache).unwrap();
                let blocks = grads.blocks();
                let trainable = model.trainable();
                assert_eq!(blocks.len(), trainable.len());
                for (g, p) in blocks.iter().zip(&trainable) {
                    assert_eq!(g.shape(), p.shape());
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_pure() {
        let (batch, c, m, classes) = tiny_batch(4);
        let spec = spec_for(Modality::Both, AggKind::Dbof, FusionKind::Mfb, c, m, classes);
        let model = Model::init(spec, 7);
        let (d1, _) = model.forward(&batch, false, &mut Rng::new(1)).unwrap();
        let (d2, _) = model.forward(&batch, false, &mut Rng::new(999)).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_outputs_bit_exactly() {
        let (batch, c, m, classes) = tiny_batch(4);
        for (agg, fusion, modality) in [
            (AggKind::Avg, FusionKind::Mfb, Modality::Both),
            (AggKind::Dbof, FusionKind::Concat, Modality::Both),
            (AggKind::NetVlad, FusionKind::FcConcat, Modality::Both),
            (AggKind::Dbof, FusionKind::Mfb, Modality::AudioOnly),
        ] {
            let spec = spec_for(modality, agg, fusion, c, m, classes);
            let mut model = Model::init(spec, 11);
            // Push some BN state away from the defaults before saving.
            let (_, cache) = model.forward(&batch, true, &mut Rng::new(3)).unwrap();
            model.apply_bn_updates(&cache);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.mmck");
            model.save(&path).unwrap();
            let loaded = Model::load(&path).unwrap();
            assert_eq!(loaded.spec, model.spec);
            let (d1, _) = model.forward(&batch, false, &mut Rng::new(1)).unwrap();
            let (d2, _) = loaded.forward(&batch, false, &mut Rng::new(1)).unwrap();
            for (a, b) in d1.data().iter().zip(d2.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn mismatched_checkpoint_is_rejected() {
        let (_, c, m, classes) = tiny_batch(4);
        let spec = spec_for(Modality::Both, AggKind::Avg, FusionKind::Mfb, c, m, classes);
        let model = Model::init(spec, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mmck");
        model.save(&path).unwrap();
        // A model with different dims cannot load this checkpoint: the meta
        // decodes fine but shapes are validated against the stored spec, so
        // corrupt one block's shape on disk instead.
        let mut blocks = crate::checkpoint::load_blocks(&path).unwrap();
        let pos = blocks.iter().position(|(n, _)| n == "moe.gate_weights").unwrap();
        blocks[pos].1 = Matrix::zeros(1, 1);
        let refs: Vec<(String, &Matrix)> =
            blocks.iter().map(|(n, m)| (n.clone(), m)).collect();
        crate::checkpoint::save_blocks(&path, &refs).unwrap();
        let err = Model::load(&path).unwrap_err();
        assert!(err.to_string().contains("moe.gate_weights"), "got {err}");
    }

    #[test]
    fn single_modality_models_have_no_fusion_blocks() {
        let (_, c, m, classes) = tiny_batch(4);
        let spec = spec_for(Modality::AudioOnly, AggKind::Avg, FusionKind::Mfb, c, m, classes);
        let model = Model::init(spec, 2);
        let names = model.trainable_names();
        assert!(names.iter().all(|n| !n.starts_with("fusion.")), "{names:?}");
        assert_eq!(model.spec.fused_dim(), m);
    }
}
