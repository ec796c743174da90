//! AdamW with decoupled weight decay and global gradient-norm clipping, plus the warmup/cosine
//! learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor, Var};

use crate::config::TrainConfig;

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `end_lr` at `steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.steps - cfg.warmup_steps).max(1) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.end_lr + 0.5 * (cfg.peak_lr - cfg.end_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

pub struct AdamW {
    slots: Vec<Slot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip: f64,
    t: i32,
}

impl AdamW {
    /// Weight decay applies to tensors of rank two or more; biases and norm gains are exempt.
    pub fn new(vars: Vec<Var>, weight_decay: f64, clip: f64) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                let decay = var.rank() >= 2;
                Ok(Slot { m: var.zeros_like()?, v: var.zeros_like()?, var, decay })
            })
            .collect::<Result<_>>()?;
        Ok(AdamW { slots, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, clip, t: 0 })
    }

    /// Applies one update and returns the pre-clip global gradient norm.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<f64> {
        let mut sq = 0.0;
        for s in &self.slots {
            if let Some(g) = grads.get(&s.var) {
                sq += g.detach().sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let factor = if norm > self.clip { self.clip / (norm + 1e-12) } else { 1.0 };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for s in &mut self.slots {
            let Some(g) = grads.get(&s.var) else { continue };
            // leaf gradients still carry the op history of the backward pass
            let g = (g.detach() * factor)?;
            s.m = ((&s.m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            s.v = ((&s.v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&s.m / bc1)? / ((&s.v / bc2)?.sqrt()? + self.eps)?)?;
            let theta = s.var.as_tensor();
            let mut next = (theta - (update * lr)?)?;
            if s.decay && self.weight_decay > 0.0 {
                next = (next - (theta * (lr * self.weight_decay))?)?;
            }
            s.var.set(&next.detach())?;
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn cfg() -> TrainConfig {
        TrainConfig { steps: 1000, warmup_steps: 100, peak_lr: 1e-3, end_lr: 4.5e-4, ..TrainConfig::pretrain() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(100, &c), 1e-3);
        assert!((lr_at(1000, &c) - 4.5e-4).abs() < 1e-18);
        assert!((lr_at(50, &c) - 5e-4).abs() < 1e-15);
        let mid = lr_at(550, &c);
        assert!((mid - 0.5 * (1e-3 + 4.5e-4)).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_continuous_and_monotone_after_warmup() {
        let c = cfg();
        assert!((lr_at(99, &c) - lr_at(100, &c)).abs() < 1.1e-5);
        assert!((lr_at(101, &c) - lr_at(100, &c)).abs() < 1e-8);
        for s in 100..1000 {
            assert!(lr_at(s + 1, &c) <= lr_at(s, &c));
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let dev = Device::Cpu;
        let x = Var::new(&[3f32, -2.0], &dev).unwrap();
        let mut opt = AdamW::new(vec![x.clone()], 0.0, 100.0).unwrap();
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&g, 0.05).unwrap();
        }
        let v: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        assert!(v.iter().all(|c| c.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn clipping_bounds_the_first_update() {
        let dev = Device::Cpu;
        let x = Var::new(&[1000f32], &dev).unwrap();
        let mut opt = AdamW::new(vec![x.clone()], 0.0, 1.0).unwrap();
        let g = x.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let norm = opt.step(&g, 0.1).unwrap();
        assert!((norm - 2000.0).abs() < 1e-3);
        // Adam's first step moves by lr regardless of magnitude
        let v: f32 = x.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((v - 999.9).abs() < 1e-3);
        let w = Var::new(&[[1f32, 1.0]], &dev).unwrap();
        let b = Var::new(&[1f32], &dev).unwrap();
        let mut opt = AdamW::new(vec![w.clone(), b.clone()], 0.5, 1.0).unwrap();
        let g = (w.as_tensor().sum_all().unwrap() + b.as_tensor().sum_all().unwrap()).unwrap().backward().unwrap();
        opt.step(&g, 0.1).unwrap();
        // decay on the matrix only: 1 - 0.1 - 0.1 * 0.5
        let v: Vec<Vec<f32>> = w.as_tensor().to_vec2().unwrap();
        assert!((v[0][0] - 0.85).abs() < 1e-6, "{v:?}");
        assert!((b.as_tensor().to_vec1::<f32>().unwrap()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn moments_hold_no_autograd_history() {
        let dev = Device::Cpu;
        let w = Var::from_tensor(&Tensor::new(&[[1.0f32, 2.0], [3.0, 4.0]], &dev).unwrap()).unwrap();
        let x = Var::from_tensor(&Tensor::new(&[[0.5f32], [0.25]], &dev).unwrap()).unwrap();
        let mut opt = AdamW::new(vec![w.clone(), x.clone()], 0.01, 1.0).unwrap();
        let g = w.as_tensor().matmul(x.as_tensor()).unwrap().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(g.get(&w).unwrap().track_op());
        opt.step(&g, 1e-3).unwrap();
        assert!(opt.slots.iter().all(|s| !s.m.track_op() && !s.v.track_op()));
    }
}
