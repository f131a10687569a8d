//! Plain-text `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected so typos fail loudly.

use std::path::Path;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};

/// Splits config text into `(key, value)` pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected `key = value`, got `{raw}`",
                lineno + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse value `{value}`")))
}

/// Which fusion operator joins the two aggregated modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Mfb,
    Concat,
    FcConcat,
}

impl FusionKind {
    pub fn parse(value: &str) -> Result<Self> {
        match value {
            "mfb" => Ok(FusionKind::Mfb),
            "concat" => Ok(FusionKind::Concat),
            "fc_concat" => Ok(FusionKind::FcConcat),
            other => Err(Error::Config(format!(
                "key `fusion.kind`: unknown fusion `{other}` (expected mfb, concat, or fc_concat)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::Mfb => "mfb",
            FusionKind::Concat => "concat",
            FusionKind::FcConcat => "fc_concat",
        }
    }
}

/// Which temporal aggregator collapses frames per modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggKind {
    Avg,
    Dbof,
    NetVlad,
}

impl AggKind {
    pub fn parse(value: &str) -> Result<Self> {
        match value {
            "avg" => Ok(AggKind::Avg),
            "dbof" => Ok(AggKind::Dbof),
            "netvlad" => Ok(AggKind::NetVlad),
            other => Err(Error::Config(format!(
                "key `agg.kind`: unknown aggregator `{other}` (expected avg, dbof, or netvlad)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AggKind::Avg => "avg",
            AggKind::Dbof => "dbof",
            AggKind::NetVlad => "netvlad",
        }
    }
}

/// Full run configuration for training and comparison commands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fusion_kind: FusionKind,
    pub fusion_rank: usize,
    pub fusion_out: usize,
    pub fusion_dropout: f64,
    pub agg_kind: AggKind,
    pub agg_clusters: usize,
    pub agg_dbof_dim: usize,
    pub agg_frames: usize,
    pub moe_mixtures: usize,
    pub moe_l2: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub eval_every: u64,
    pub seed: u64,
    pub learning_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            fusion_kind: FusionKind::Mfb,
            fusion_rank: 4,
            fusion_out: 1024,
            fusion_dropout: 0.1,
            agg_kind: AggKind::Avg,
            agg_clusters: 8,
            agg_dbof_dim: 2000,
            agg_frames: 300,
            moe_mixtures: 2,
            moe_l2: 1e-6,
            batch_size: 16,
            max_steps: 5000,
            eval_every: 250,
            seed: 42,
            learning_rate: 2e-4,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (key, value) in parse_kv(text)? {
            match key.as_str() {
                "fusion.kind" => cfg.fusion_kind = FusionKind::parse(&value)?,
                "fusion.k" => cfg.fusion_rank = parse_value(&key, &value)?,
                "fusion.o" => cfg.fusion_out = parse_value(&key, &value)?,
                "fusion.dropout" => cfg.fusion_dropout = parse_value(&key, &value)?,
                "agg.kind" => cfg.agg_kind = AggKind::parse(&value)?,
                "agg.clusters" => cfg.agg_clusters = parse_value(&key, &value)?,
                "agg.dbof_dim" => cfg.agg_dbof_dim = parse_value(&key, &value)?,
                "agg.frames" => cfg.agg_frames = parse_value(&key, &value)?,
                "moe.mixtures" => cfg.moe_mixtures = parse_value(&key, &value)?,
                "moe.l2" => cfg.moe_l2 = parse_value(&key, &value)?,
                "train.batch_size" => cfg.batch_size = parse_value(&key, &value)?,
                "train.max_steps" => cfg.max_steps = parse_value(&key, &value)?,
                "train.eval_every" => cfg.eval_every = parse_value(&key, &value)?,
                "train.seed" => cfg.seed = parse_value(&key, &value)?,
                "train.lr" => cfg.learning_rate = parse_value(&key, &value)?,
                other => {
                    return Err(Error::Config(format!("unknown config key `{other}`")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fusion_rank == 0 || self.fusion_out == 0 {
            return Err(Error::Config("fusion.k and fusion.o must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.fusion_dropout) {
            return Err(Error::Config(format!(
                "fusion.dropout must be in [0, 1), got {}",
                self.fusion_dropout
            )));
        }
        if self.agg_clusters == 0 {
            return Err(Error::Config("agg.clusters must be >= 1".into()));
        }
        if self.agg_dbof_dim == 0 {
            return Err(Error::Config("agg.dbof_dim must be >= 1".into()));
        }
        if self.agg_frames == 0 {
            return Err(Error::Config("agg.frames must be >= 1".into()));
        }
        if self.moe_mixtures == 0 {
            return Err(Error::Config("moe.mixtures must be >= 1".into()));
        }
        if self.moe_l2 < 0.0 {
            return Err(Error::Config("moe.l2 must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        Ok(())
    }

    /// DBoF projection width for the audio tower: the visual width scaled by
    /// the ratio of the feature dimensions, rounded, floored at 1.
    pub fn dbof_audio_dim(&self, visual_dim: usize, audio_dim: usize) -> usize {
        let scaled = self.agg_dbof_dim as f64 * audio_dim as f64 / visual_dim as f64;
        (scaled.round() as usize).max(1)
    }
}

/// Parses a synthetic-dataset spec file (same `key = value` syntax).
pub fn parse_synthetic_spec(text: &str) -> Result<SyntheticSpec> {
    let mut spec = SyntheticSpec::default();
    for (key, value) in parse_kv(text)? {
        match key.as_str() {
            "videos" => spec.videos = parse_value(&key, &value)?,
            "classes" => spec.classes = parse_value(&key, &value)?,
            "visual_dim" => spec.visual_dim = parse_value(&key, &value)?,
            "audio_dim" => spec.audio_dim = parse_value(&key, &value)?,
            "rank" => spec.rank = parse_value(&key, &value)?,
            "noise" => spec.noise = parse_value(&key, &value)?,
            "frames_min" => spec.frames_min = parse_value(&key, &value)?,
            "frames_max" => spec.frames_max = parse_value(&key, &value)?,
            "tau" => spec.tau = parse_value(&key, &value)?,
            "seed" => spec.seed = parse_value(&key, &value)?,
            "first_index" => spec.first_index = parse_value(&key, &value)?,
            other => {
                return Err(Error::Config(format!("unknown spec key `{other}`")));
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}
