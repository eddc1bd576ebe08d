//! Retrieval-augmented sequential recommendation.
//!
//! The pipeline has two training stages. A causal transformer backbone is
//! pre-trained on next-item prediction plus an in-batch contrastive retrieval
//! objective. Its representations of every training prefix are then stored in
//! an explicit memory bank (indexed with an inverted-file k-means structure),
//! and a small dual-channel cross-attention module is fine-tuned on top of the
//! frozen backbone to fuse retrieved memories into the user representation.
//!
//! Module map:
//! - [`tensor`], [`graph`], [`attention`], [`param`], [`optim`], [`gradcheck`], [`checkpoint`]: numeric core
//! - [`data`]: ingestion, k-core filtering, leave-one-out splits, noise injection
//! - [`encoder`]: the sequence encoder backbone
//! - [`pretrain`]: recommendation + retrieval pre-training
//! - [`memory`]: memory bank, spherical k-means, IVF retrieval
//! - [`ram`]: retrieval-augmented module, fine-tuning and augmented inference
//! - [`eval`], [`ablation`]: ranking metrics, cohort grouping and ablation protocols
//! - [`config`], [`pipeline`]: run configuration and artifact orchestration

// `Real` may be `f32`, so casts and conversions to `f64` are not no-ops.
#![allow(clippy::unnecessary_cast, clippy::useless_conversion)]

pub mod ablation;
pub mod attention;
pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod memory;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod pretrain;
pub mod ram;
pub mod rng;
pub mod tensor;

#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

/// Slack for exact-arithmetic unit tests at the active precision.
#[cfg(all(test, not(feature = "single-precision")))]
pub(crate) const TIGHT: Real = 1e-12;
#[cfg(all(test, feature = "single-precision"))]
pub(crate) const TIGHT: Real = 1e-5;

pub type ItemId = u32;
pub type UserId = u32;

pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error(transparent)]
    Shape(#[from] tensor::ShapeError),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("corpus is empty after filtering")]
    EmptyCorpus,
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("missing dependency: {0}")]
    MissingDependency(String),
    #[error("lineage mismatch: {0}")]
    LineageMismatch(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Diverged { epoch: usize, msg: String },
    #[error("self-check failed: {0}")]
    SelfCheck(String),
    #[error("malformed file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
