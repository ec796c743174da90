//! Evaluation metrics: pairwise pose accuracy, aligned trajectory error, motion profiles,
//! report aggregation and the latent probe.

pub mod pose;
pub mod probe;
pub mod profile;
pub mod report;

use crate::geometry::GeometryError;

pub use pose::{ate_m, ate_s, auc5, pairwise_errors, AlignmentStatus, Ate, AteResult, AucResult};
pub use probe::{latent_probe, pca_2d, ProbeConfig, ProbeResult};
pub use profile::{acceleration_profile, curvature_profile, MotionBin, Profile};
pub use report::{bucketed_report, evaluate_clip, ClipEval, ClipEvalInput, EvalReport, FpsRow};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("length mismatch: prediction has {pred} entries, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("probe needs at least two classes")]
    SingleClass,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}
