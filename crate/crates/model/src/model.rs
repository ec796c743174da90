//! The full network: tokenizer, inverse and forward dynamics, and the pose head, sharing one
//! parameter store.

use candle_core::{Device, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::forward_dynamics::{pretrain_loss, ForwardDynamics};
use crate::inverse_dynamics::{InverseDynamics, Latents};
use crate::nn::VarStore;
use crate::pose_head::{PoseHead, PoseRaw};
use crate::tokenizer::Tokenizer;
use crate::ModelError;

pub const POSE_HEAD_PREFIX: &str = "pose_head.";

/// Frames (B, T, H, W, 3) as u8 values stored in f32, plus per-frame timestamps in seconds.
pub struct ClipInput {
    pub frames: Tensor,
    pub timestamps: Vec<Vec<f64>>,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub vs: VarStore,
    pub tokenizer: Tokenizer,
    pub idm: InverseDynamics,
    pub fdm: ForwardDynamics,
    pub pose_head: PoseHead,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, device: &Device) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut vs = VarStore::new(seed, device);
        let tokenizer = Tokenizer::new(&mut vs, cfg)?;
        let idm = InverseDynamics::new(&mut vs, cfg)?;
        let fdm = ForwardDynamics::new(&mut vs, cfg)?;
        let pose_head = PoseHead::new(&mut vs, cfg)?;
        Ok(Model { cfg: cfg.clone(), vs, tokenizer, idm, fdm, pose_head })
    }

    pub fn device(&self) -> &Device {
        self.vs.device()
    }

    /// Token grids (B, T, N, D) and temporal embeddings (B, T, D).
    pub fn encode(&self, input: &ClipInput) -> candle_core::Result<(Tensor, Tensor)> {
        let time_emb = self.tokenizer.temporal_embed(&input.timestamps, self.device(), self.vs.dtype())?;
        let frames = crate::tokenizer::normalize_pixels(&input.frames)?;
        Ok((self.tokenizer.encode(&frames, &time_emb)?, time_emb))
    }

    pub fn infer_latents(&self, input: &ClipInput) -> candle_core::Result<Latents> {
        let (grids, time_emb) = self.encode(input)?;
        self.idm.infer(&grids, &time_emb)
    }

    /// Logits (B, T-1, N, K) for frames 1..T.
    pub fn pretrain_logits(&self, input: &ClipInput) -> candle_core::Result<Tensor> {
        let (grids, time_emb) = self.encode(input)?;
        let t = grids.dim(1)?;
        let latents = self.idm.infer(&grids, &time_emb)?;
        self.fdm.predict_next_logits(&grids.narrow(1, 0, t - 1)?, &latents.decompressed)
    }

    /// Cross-entropy against codes (B, T, N) of all frames; frame 0 is never a target.
    pub fn pretrain_loss(&self, input: &ClipInput, codes: &Tensor) -> candle_core::Result<Tensor> {
        let logits = self.pretrain_logits(input)?;
        let t = codes.dim(1)?;
        pretrain_loss(&logits, &codes.narrow(1, 1, t - 1)?)
    }

    pub fn predict_pose(&self, input: &ClipInput) -> candle_core::Result<(PoseRaw, Latents)> {
        let latents = self.infer_latents(input)?;
        Ok((self.pose_head.forward(&latents.actions)?, latents))
    }

    pub fn backbone_vars(&self) -> Vec<(String, Var)> {
        self.vs.entries().iter().filter(|(n, _)| !n.starts_with(POSE_HEAD_PREFIX)).cloned().collect()
    }

    pub fn head_vars(&self) -> Vec<(String, Var)> {
        self.vs.vars_with_prefix(POSE_HEAD_PREFIX)
    }

    /// SHA-256 over names and raw values of the given parameters.
    pub fn hash_vars(vars: &[(String, Var)]) -> Result<String, ModelError> {
        let mut h = Sha256::new();
        for (name, var) in vars {
            h.update(name.as_bytes());
            let v: Vec<f32> = var.as_tensor().flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn backbone_hash(&self) -> Result<String, ModelError> {
        Self::hash_vars(&self.backbone_vars())
    }

    /// Copies values for every parameter of `other` whose name matches; returns how many.
    pub fn copy_from(&self, other: &Model, include_head: bool) -> Result<usize, ModelError> {
        if !self.cfg.same_architecture(&other.cfg) {
            return Err(ModelError::Architecture("model configs differ".into()));
        }
        let mut n = 0;
        for (name, var) in other.vs.entries() {
            if !include_head && name.starts_with(POSE_HEAD_PREFIX) {
                continue;
            }
            let dst = self.vs.get(name).ok_or_else(|| ModelError::Architecture(format!("missing parameter {name}")))?;
            dst.set(var.as_tensor())?;
            n += 1;
        }
        Ok(n)
    }
}
