//! Deterministic synthetic driving clips with exact ground-truth ego-motion.

pub mod dataset;
pub mod motion;
pub mod render;

pub use dataset::{
    generate_dataset, load_clip, load_dataset, sample_clip_spec, sample_clip_specs, Clip, ClipSpec, DatasetConfig,
    DatasetError, MotionMix, Split, EVAL_FPS, TRAIN_FPS_CHOICES,
};
pub use motion::{sample_motion, MotionKind, MotionSpec, WorldPose, CLIP_FRAMES};
pub use render::{render_frame, render_sequence, Frame, WorldSpec, FRAME_HEIGHT, FRAME_WIDTH};
