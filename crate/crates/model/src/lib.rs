//! Latent action pretraining and camera pose post-training on candle.
//!
//! A per-frame tokenizer feeds a causal spatiotemporal inverse dynamics model whose latent
//! actions condition a forward dynamics model predicting next-frame codebook indices. A pose
//! head then maps the latent actions to relative poses, field of view and a metric scale.

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod eval;
pub mod forward_dynamics;
pub mod inverse_dynamics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod pose_head;
pub mod tokenizer;
pub mod trainer;

use std::path::{Path, PathBuf};

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use codebook::Codebook;
pub use config::{ModelConfig, Profile, Stage, TrainConfig};
pub use model::Model;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("codebook: {0}")]
    Codebook(String),
    #[error("invalid targets: {0}")]
    Target(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] lapose_core::synthworld::DatasetError),
    #[error(transparent)]
    Metric(#[from] lapose_core::metrics::MetricError),
    #[error(transparent)]
    Geometry(#[from] lapose_core::geometry::GeometryError),
}

impl ModelError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io { path: path.to_path_buf(), source }
    }
}
