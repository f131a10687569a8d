//! Fusion of precomputed video and audio features for multi-label video
//! classification.
//!
//! The pipeline is: per-modality temporal aggregation of frame-level
//! features (average pooling, deep bag-of-frames, or learnable VLAD), a
//! fusion operator (factorized bilinear pooling, concatenation, or
//! projected concatenation), and a mixture-of-experts classifier trained
//! with multi-label cross-entropy under Adam. All gradients are
//! hand-written and verified against central finite differences; data
//! generation, initialization, batching, and training are fully
//! deterministic given a seed.

pub mod aggregation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod train;

pub use config::{AggKind, FusionKind, RunConfig};
pub use data::{Batch, Dataset, SyntheticSpec, VideoRecord};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{Modality, Model, ModelSpec};
pub use rng::{derive_seed, Rng};
pub use train::{evaluate, train, EvalRow, TrainConfig, TrainOutcome};
