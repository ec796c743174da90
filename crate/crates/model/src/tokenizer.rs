//! Patch embedding, frame-rate aware temporal embedding and the per-frame encoder.

use candle_core::{DType, Device, Result, Tensor};

use crate::config::ModelConfig;
use crate::nn::{Block, LayerNorm, Linear, VarStore};

/// Shortest and longest sinusoid periods in seconds.
const PERIOD_RANGE: (f64, f64) = (0.5, 128.0);

/// Maps u8 RGB frames laid out (B, T, H, W, 3) to roughly zero-mean floats.
pub fn normalize_pixels(frames: &Tensor) -> Result<Tensor> {
    (frames.to_dtype(DType::F32)? * (2.0 / 255.0))? - 1.0
}

/// (B, T, H, W, 3) -> (B, T, N, 3 p^2) with patches in row-major grid order and each patch
/// flattened as (row, column, channel).
pub fn patchify(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, t, h, w, c) = frames.dims5()?;
    if h % patch != 0 || w % patch != 0 {
        candle_core::bail!("frame {w}x{h} not divisible by patch {patch}");
    }
    let (hp, wp) = (h / patch, w / patch);
    frames
        .reshape((b * t, hp, patch, wp, patch * c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b, t, hp * wp, patch * patch * c))
}

/// Sinusoidal features of a timestamp in seconds: `[sin(w_k t), cos(w_k t)]` with
/// geometrically spaced periods.
pub fn time_features(timestamp: f64, frequencies: usize) -> Vec<f64> {
    let (lo, hi) = PERIOD_RANGE;
    let mut out = Vec::with_capacity(2 * frequencies);
    for k in 0..frequencies {
        let frac = if frequencies > 1 { k as f64 / (frequencies - 1) as f64 } else { 0.0 };
        let period = lo * (hi / lo).powf(frac);
        let w = std::f64::consts::TAU / period;
        out.push((w * timestamp).sin());
        out.push((w * timestamp).cos());
    }
    out
}

pub struct Tokenizer {
    patch_proj: Linear,
    pos: Tensor,
    time_fc1: Linear,
    time_fc2: Linear,
    blocks: Vec<Block>,
    ln_out: LayerNorm,
    cfg: ModelConfig,
}

impl Tokenizer {
    pub fn new(vs: &mut VarStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Tokenizer {
            patch_proj: Linear::new(vs, "tokenizer.patch_proj", cfg.patch_dim(), d)?,
            pos: vs.normal("tokenizer.pos", &[cfg.tokens_per_frame(), d], 0.02)?,
            time_fc1: Linear::new(vs, "tokenizer.time_fc1", 2 * cfg.time_frequencies, d)?,
            time_fc2: Linear::new(vs, "tokenizer.time_fc2", d, d)?,
            blocks: (0..cfg.encoder_layers)
                .map(|i| Block::new(vs, &format!("tokenizer.block{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.encoder_layers))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(vs, "tokenizer.ln_out", d)?,
            cfg: cfg.clone(),
        })
    }

    /// Timestamps (seconds) of shape (B, T) to embeddings (B, T, D).
    pub fn temporal_embed(&self, timestamps: &[Vec<f64>], device: &Device, dtype: DType) -> Result<Tensor> {
        let b = timestamps.len();
        let t = timestamps.first().map_or(0, Vec::len);
        let f = 2 * self.cfg.time_frequencies;
        let feats: Vec<f64> = timestamps.iter().flat_map(|row| row.iter().flat_map(|ts| time_features(*ts, self.cfg.time_frequencies))).collect();
        let x = Tensor::from_vec(feats, (b, t, f), device)?.to_dtype(dtype)?;
        self.time_fc2.forward(&crate::ops::relu(&self.time_fc1.forward(&x)?)?)
    }

    /// Encodes each frame independently. `frames`: normalized (B, T, H, W, 3); `time_emb`:
    /// (B, T, D). Returns token grids (B, T, N, D).
    pub fn encode(&self, frames: &Tensor, time_emb: &Tensor) -> Result<Tensor> {
        let x = self.patch_proj.forward(&patchify(frames, self.cfg.patch)?)?;
        let (b, t, n, d) = x.dims4()?;
        let x = x.broadcast_add(&self.pos)?.broadcast_add(&time_emb.unsqueeze(2)?)?;
        let mut x = x.reshape((b * t, n, d))?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        self.ln_out.forward(&x)?.reshape((b, t, n, d))
    }
}
