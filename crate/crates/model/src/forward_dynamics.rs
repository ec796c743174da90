//! Forward dynamics model: next-frame code logits from past frames and latent actions.

use candle_core::{Result, Tensor, D};

use crate::config::ModelConfig;
use crate::nn::{causal_mask, LayerNorm, Linear, StBlock, VarStore};

pub struct ForwardDynamics {
    blocks: Vec<StBlock>,
    ln_out: LayerNorm,
    head: Linear,
    k: usize,
}

impl ForwardDynamics {
    pub fn new(vs: &mut VarStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(ForwardDynamics {
            blocks: (0..cfg.fdm_layers)
                .map(|i| StBlock::new(vs, &format!("fdm.block{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.fdm_layers))
                .collect::<Result<_>>()?,
            ln_out: LayerNorm::new(vs, "fdm.ln_out", d)?,
            // zero init: logits start uniform
            head: Linear::with_std(vs, "fdm.head", d, cfg.codebook_size, 0.0)?,
            k: cfg.codebook_size,
        })
    }

    /// `grids`: token grids of frames 0..T-2 as (B, T-1, N, D); `latents`: decompressed
    /// actions (B, T-1, D). Position t of the output holds logits (N, K) for frame t+1, which see
    /// frames 0..=t and actions 0..=t only.
    pub fn predict_next_logits(&self, grids: &Tensor, latents: &Tensor) -> Result<Tensor> {
        let (_, t, _, _) = grids.dims4()?;
        if latents.dim(1)? != t {
            candle_core::bail!("{} latents for {t} conditioning frames", latents.dim(1)?);
        }
        let causal = causal_mask(t, grids.device(), grids.dtype())?;
        let mut x = grids.broadcast_add(&latents.unsqueeze(2)?)?;
        for block in &self.blocks {
            x = block.forward(&x, &causal)?;
        }
        self.head.forward(&self.ln_out.forward(&x)?)
    }

    pub fn codebook_size(&self) -> usize {
        self.k
    }
}

/// Mean cross-entropy of `logits` (..., K) against integer `targets` (...).
pub fn pretrain_loss(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let k = logits.dim(D::Minus1)?;
    let flat = logits.reshape(((), k))?;
    crate::ops::cross_entropy(&flat, &targets.flatten_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn cfg() -> ModelConfig {
        ModelConfig { d_model: 32, fdm_layers: 2, ..ModelConfig::default() }
    }

    fn randn(seed: u64, shape: &[usize]) -> Tensor {
        VarStore::new(seed, &Device::Cpu).normal("x", shape, 1.0).unwrap()
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::zeros((2, 3, 32, 256), DType::F32, &Device::Cpu).unwrap();
        let targets = Tensor::from_vec((0..192u32).map(|i| (i * 37) % 256).collect::<Vec<_>>(), (2, 3, 32), &Device::Cpu).unwrap();
        let l: f32 = pretrain_loss(&logits, &targets).unwrap().to_scalar().unwrap();
        assert!((l as f64 - 256f64.ln()).abs() < 1e-5, "{l}");
        assert!((256f64.ln() - 5.545).abs() < 1e-3);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let targets = Tensor::from_vec(vec![3u32, 1, 0], 3, &Device::Cpu).unwrap();
        let mut v = vec![0f32; 12];
        for (i, t) in [3, 1, 0].iter().enumerate() {
            v[i * 4 + t] = 50.0;
        }
        let logits = Tensor::from_vec(v, (3, 4), &Device::Cpu).unwrap();
        let l: f32 = pretrain_loss(&logits, &targets).unwrap().to_scalar().unwrap();
        assert!((0.0..1e-6).contains(&l));
    }

    #[test]
    fn fresh_model_predicts_uniform() {
        let mut vs = VarStore::new(0, &Device::Cpu);
        let fdm = ForwardDynamics::new(&mut vs, &cfg()).unwrap();
        let logits = fdm.predict_next_logits(&randn(1, &[2, 4, 32, 32]), &randn(2, &[2, 4, 32])).unwrap();
        assert_eq!(logits.dims(), &[2, 4, 32, 256]);
        let max = logits.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(max, 0.0);
    }

    #[test]
    fn logits_are_causal_in_frames_and_latents() {
        let mut vs = VarStore::new(0, &Device::Cpu);
        let fdm = ForwardDynamics::new(&mut vs, &cfg()).unwrap();
        // give the head weights so logits are informative
        let head = vs.get("fdm.head.weight").unwrap();
        head.set(&randn(9, &[32, 256])).unwrap();
        let g = randn(1, &[1, 5, 32, 32]);
        let a = randn(2, &[1, 5, 32]);
        let base = fdm.predict_next_logits(&g, &a).unwrap();
        let t = 2;
        let zeroed = Tensor::cat(&[a.narrow(1, 0, t).unwrap(), a.narrow(1, t, 1).unwrap().zeros_like().unwrap(), a.narrow(1, t + 1, 2).unwrap()], 1).unwrap();
        let out = fdm.predict_next_logits(&g, &zeroed).unwrap();
        for s in 0..t {
            assert_eq!(base.get(0).unwrap().get(s).unwrap().to_vec2::<f32>().unwrap(), out.get(0).unwrap().get(s).unwrap().to_vec2::<f32>().unwrap());
        }
        assert_ne!(base.get(0).unwrap().get(t).unwrap().to_vec2::<f32>().unwrap(), out.get(0).unwrap().get(t).unwrap().to_vec2::<f32>().unwrap());
        let g2 = Tensor::cat(&[g.narrow(1, 0, t + 1).unwrap(), randn(5, &[1, 2, 32, 32])], 1).unwrap();
        let out = fdm.predict_next_logits(&g2, &a).unwrap();
        for s in 0..=t {
            assert_eq!(base.get(0).unwrap().get(s).unwrap().to_vec2::<f32>().unwrap(), out.get(0).unwrap().get(s).unwrap().to_vec2::<f32>().unwrap());
        }
    }
}
