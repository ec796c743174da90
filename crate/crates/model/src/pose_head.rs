//! Pose head over latent actions and the post-training loss.

use candle_core::{DType, Device, Result, Tensor, D};
use lapose_core::geometry::{MetricScale, PoseSequence, Quaternion, RelativePose, Vec3, SCALE_EPSILON};

use crate::config::{LossWeights, ModelConfig};
use crate::nn::{Block, LayerNorm, Mlp, VarStore};
use crate::ModelError;

/// Raw values per step: translation (3), quaternion (4), field of view (1).
pub const STEP_OUTPUTS: usize = 8;

/// Unconstrained head outputs.
#[derive(Clone)]
pub struct PoseRaw {
    /// (B, L, 8)
    pub steps: Tensor,
    /// (B,), the log of the metric scale.
    pub scale: Tensor,
}

pub struct PoseHead {
    slots: Tensor,
    scale_token: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    step_mlp: Mlp,
    scale_mlp: Mlp,
}

impl PoseHead {
    pub fn new(vs: &mut VarStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let head = PoseHead {
            slots: vs.normal("pose_head.slots", &[cfg.clip_frames - 1, d], 0.02)?,
            scale_token: vs.normal("pose_head.scale_token", &[d], 0.02)?,
            blocks: (0..cfg.pose_layers)
                .map(|i| Block::new(vs, &format!("pose_head.block{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.pose_layers))
                .collect::<Result<_>>()?,
            ln: LayerNorm::new(vs, "pose_head.ln", d)?,
            step_mlp: Mlp::new(vs, "pose_head.step_mlp", d, d, STEP_OUTPUTS, 0.01)?,
            scale_mlp: Mlp::new(vs, "pose_head.scale_mlp", d, d, 1, 0.01)?,
        };
        // start from identity rotations so quaternion normalization is well conditioned
        let bias = vs.get("pose_head.step_mlp.fc2.bias").expect("registered");
        bias.set(&Tensor::new(&[0f32, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], vs.device())?.to_dtype(vs.dtype())?)?;
        Ok(head)
    }

    /// Non-causal transformer over the latents plus one scale token. `latents`: (B, L, D).
    pub fn forward(&self, latents: &Tensor) -> Result<PoseRaw> {
        let (b, l, d) = latents.dims3()?;
        if l > self.slots.dim(0)? {
            candle_core::bail!("{l} latents exceed the {} slot embeddings", self.slots.dim(0)?);
        }
        let x = latents.broadcast_add(&self.slots.narrow(0, 0, l)?)?;
        let tok = self.scale_token.reshape((1, 1, d))?.broadcast_as((b, 1, d))?;
        let mut x = Tensor::cat(&[x, tok.contiguous()?], 1)?;
        for block in &self.blocks {
            x = block.forward(&x, None)?;
        }
        let x = self.ln.forward(&x)?;
        let steps = self.step_mlp.forward(&x.narrow(1, 0, l)?)?;
        let scale = self.scale_mlp.forward(&x.narrow(1, l, 1)?)?.reshape(b)?;
        Ok(PoseRaw { steps, scale })
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Unit quaternions from raw 4-vectors (..., 4).
pub fn normalize_quaternion(q: &Tensor) -> Result<Tensor> {
    q.broadcast_div(&q.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)
}

pub fn fov_from_raw(raw: &Tensor) -> Result<Tensor> {
    sigmoid(raw)? * std::f64::consts::PI
}

/// Supervision for one batch.
#[derive(Clone)]
pub struct PoseTargets {
    /// (B, L, 3) scale-free translations.
    pub translation: Tensor,
    /// (B, L, 4) canonical unit quaternions (w, x, y, z).
    pub rotation: Tensor,
    /// (B, L) radians.
    pub fov: Tensor,
    /// (B,) `log max(s, eps)`.
    pub log_scale: Tensor,
}

impl PoseTargets {
    /// Builds targets from normalized sequences and their metric scales; unnormalized ground
    /// truth is rejected.
    pub fn new(items: &[(&PoseSequence, MetricScale)], device: &Device, dtype: DType) -> std::result::Result<Self, ModelError> {
        let b = items.len();
        let l = items.first().map_or(0, |(s, _)| s.len());
        let (mut t, mut q, mut f, mut s) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (seq, scale) in items {
            if !seq.is_normalized {
                return Err(ModelError::Target("ground truth must be normalized before building targets".into()));
            }
            if seq.len() != l {
                return Err(ModelError::Shape(format!("sequence lengths differ: {} vs {l}", seq.len())));
            }
            for step in &seq.steps {
                t.extend(step.translation.iter().copied());
                q.extend(step.rotation.to_array());
                f.push(step.fov);
            }
            s.push(scale.divisor(SCALE_EPSILON).ln());
        }
        let mk = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> { Tensor::from_vec(v, shape, device)?.to_dtype(dtype) };
        Ok(PoseTargets {
            translation: mk(t, &[b, l, 3])?,
            rotation: mk(q, &[b, l, 4])?,
            fov: mk(f, &[b, l])?,
            log_scale: mk(s, &[b])?,
        })
    }
}

/// Weighted loss terms, each a scalar tensor.
pub struct LossTerms {
    pub total: Tensor,
    pub translation: Tensor,
    pub rotation: Tensor,
    pub fov: Tensor,
    pub scale: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<[f64; 5]> {
        let v = |t: &Tensor| -> Result<f64> { t.to_dtype(DType::F64)?.to_scalar::<f64>() };
        Ok([v(&self.total)?, v(&self.translation)?, v(&self.rotation)?, v(&self.fov)?, v(&self.scale)?])
    }
}

/// L1 terms averaged over elements: translation, hemisphere-aligned quaternion, field of view
/// and log scale.
pub fn posttrain_loss(raw: &PoseRaw, targets: &PoseTargets, w: &LossWeights) -> Result<LossTerms> {
    let t_pred = raw.steps.narrow(D::Minus1, 0, 3)?;
    let q_pred = normalize_quaternion(&raw.steps.narrow(D::Minus1, 3, 4)?)?;
    let f_pred = fov_from_raw(&raw.steps.narrow(D::Minus1, 7, 1)?.squeeze(D::Minus1)?)?;
    let translation = (t_pred - &targets.translation)?.abs()?.mean_all()?;
    let plus = (&q_pred - &targets.rotation)?.abs()?.sum(D::Minus1)?;
    let minus = (&q_pred + &targets.rotation)?.abs()?.sum(D::Minus1)?;
    let rotation = (plus.minimum(&minus)? / 4.0)?.mean_all()?;
    let fov = (f_pred - &targets.fov)?.abs()?.mean_all()?;
    let scale = (&raw.scale - &targets.log_scale)?.abs()?.mean_all()?;
    let total = ((((&translation * w.translation)? + (&rotation * w.rotation)?)? + (&fov * w.fov)?)? + (&scale * w.scale)?)?;
    Ok(LossTerms { total, translation, rotation, fov, scale })
}

/// Decoded prediction for one clip.
#[derive(Debug, Clone)]
pub struct PosePrediction {
    pub translations: Vec<Vec3>,
    pub rotations: Vec<Quaternion>,
    pub fovs: Vec<f64>,
    /// Metric scale in meters, `exp(raw)`.
    pub scale: f64,
}

impl PosePrediction {
    pub fn decode(raw: &PoseRaw) -> Result<Vec<PosePrediction>> {
        let steps: Vec<Vec<Vec<f64>>> = raw.steps.to_dtype(DType::F64)?.to_vec3()?;
        let scales: Vec<f64> = raw.scale.to_dtype(DType::F64)?.to_vec1()?;
        Ok(steps
            .into_iter()
            .zip(scales)
            .map(|(rows, s)| {
                let mut p = PosePrediction { translations: vec![], rotations: vec![], fovs: vec![], scale: s.exp() };
                for r in rows {
                    p.translations.push(Vec3::new(r[0], r[1], r[2]));
                    let n = (r[3] * r[3] + r[4] * r[4] + r[5] * r[5] + r[6] * r[6]).sqrt().max(1e-12);
                    p.rotations.push(Quaternion::new(r[3] / n, r[4] / n, r[5] / n, r[6] / n));
                    p.fovs.push(std::f64::consts::PI / (1.0 + (-r[7]).exp()));
                }
                p
            })
            .collect())
    }

    /// The scale-free relative pose sequence; fov is clamped into the open interval.
    pub fn to_sequence(&self, fps: f64) -> PoseSequence {
        let eps = 1e-9;
        let steps = self
            .translations
            .iter()
            .zip(&self.rotations)
            .zip(&self.fovs)
            .map(|((t, q), f)| {
                let q = q.canonicalize().unwrap_or(Quaternion::IDENTITY);
                RelativePose::new(*t, q, f.clamp(eps, std::f64::consts::PI - eps)).unwrap_or(RelativePose::identity(1.0))
            })
            .collect();
        PoseSequence { steps, fps, is_normalized: true }
    }

    pub fn mean_fov(&self) -> f64 {
        self.fovs.iter().sum::<f64>() / self.fovs.len().max(1) as f64
    }

    pub fn raw_count(&self) -> usize {
        self.translations.len() * STEP_OUTPUTS + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lapose_core::geometry::normalize_translations;
    use lapose_core::synthworld::motion::{sample_motion, MotionKind, MotionSpec};

    fn head() -> (VarStore, PoseHead) {
        let cfg = ModelConfig { d_model: 32, ..ModelConfig::default() };
        let mut vs = VarStore::new(0, &Device::Cpu);
        let h = PoseHead::new(&mut vs, &cfg).unwrap();
        (vs, h)
    }

    fn gt() -> (PoseSequence, MetricScale) {
        let spec = MotionSpec::new(MotionKind::RightTurn, 6.0, 0.05, 2.0);
        normalize_translations(&sample_motion(&spec, 1.1).0, SCALE_EPSILON).unwrap()
    }

    fn raw_from(seq: &PoseSequence, log_scale: f64, flip: bool) -> PoseRaw {
        let mut v = Vec::new();
        for s in &seq.steps {
            v.extend(s.translation.iter().copied());
            let q = s.rotation.to_array();
            v.extend(q.iter().map(|x| if flip { -x } else { *x }));
            let p = s.fov / std::f64::consts::PI;
            v.push((p / (1.0 - p)).ln());
        }
        PoseRaw {
            steps: Tensor::from_vec(v, (1, seq.len(), 8), &Device::Cpu).unwrap(),
            scale: Tensor::new(&[log_scale], &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn exact_prediction_has_zero_loss_and_sign_is_irrelevant() {
        let (seq, s) = gt();
        let targets = PoseTargets::new(&[(&seq, s)], &Device::Cpu, DType::F64).unwrap();
        for flip in [false, true] {
            let raw = raw_from(&seq, s.divisor(SCALE_EPSILON).ln(), flip);
            let v = posttrain_loss(&raw, &targets, &LossWeights::default()).unwrap().values().unwrap();
            assert!(v[0].abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn scale_term_is_log_ratio() {
        let (seq, _) = gt();
        let targets = PoseTargets::new(&[(&seq, MetricScale(1.0))], &Device::Cpu, DType::F64).unwrap();
        let raw = raw_from(&seq, 2f64.ln(), false);
        let v = posttrain_loss(&raw, &targets, &LossWeights::default()).unwrap().values().unwrap();
        assert!((v[4] - 2f64.ln()).abs() < 1e-12);
        assert!((v[4] - 0.693).abs() < 1e-3);
    }

    #[test]
    fn unnormalized_ground_truth_is_rejected() {
        let spec = MotionSpec::new(MotionKind::Straight, 6.0, 0.0, 2.0);
        let raw_seq = sample_motion(&spec, 1.1).0;
        assert!(matches!(PoseTargets::new(&[(&raw_seq, MetricScale(3.0))], &Device::Cpu, DType::F32), Err(ModelError::Target(_))));
    }

    #[test]
    fn output_layout_and_positivity() {
        let (_vs, h) = head();
        let lat = VarStore::new(1, &Device::Cpu).normal("l", &[2, 15, 32], 1.0).unwrap();
        let raw = h.forward(&lat).unwrap();
        assert_eq!(raw.steps.dims(), &[2, 15, 8]);
        assert_eq!(raw.scale.dims(), &[2]);
        let preds = PosePrediction::decode(&raw).unwrap();
        assert_eq!(preds[0].raw_count(), 121);
        assert!(preds.iter().all(|p| p.scale > 0.0 && p.fovs.iter().all(|f| *f > 0.0 && *f < std::f64::consts::PI)));
        let zero = PoseRaw { steps: raw.steps.clone(), scale: Tensor::zeros(2, DType::F32, &Device::Cpu).unwrap() };
        assert_eq!(PosePrediction::decode(&zero).unwrap()[0].scale, 1.0);
    }

    #[test]
    fn slot_embeddings_make_order_matter() {
        let (_vs, h) = head();
        let lat = VarStore::new(1, &Device::Cpu).normal("l", &[1, 4, 32], 1.0).unwrap();
        let rev = Tensor::cat(&[lat.narrow(1, 3, 1).unwrap(), lat.narrow(1, 2, 1).unwrap(), lat.narrow(1, 1, 1).unwrap(), lat.narrow(1, 0, 1).unwrap()], 1).unwrap();
        let a: Vec<Vec<f32>> = h.forward(&lat).unwrap().steps.squeeze(0).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = h.forward(&rev).unwrap().steps.squeeze(0).unwrap().to_vec2().unwrap();
        assert_ne!(a[0], b[3]);
    }
}
