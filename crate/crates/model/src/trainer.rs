//! Pretraining and post-training loops.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::codebook::{fit_codebook, Codebook, LLOYD_ITERATIONS};
use crate::config::{Stage, TrainConfig};
use crate::data::{sample_batch, BatchItem, ClipSource};
use crate::model::Model;
use crate::optim::{lr_at, AdamW};
use crate::pose_head::{posttrain_loss, PoseTargets};
use crate::ModelError;

/// Batches in the fixed cross-entropy evaluation set.
pub const CE_EVAL_BATCHES: usize = 4;
/// Consecutive steps above ten times the initial loss that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<(), ModelError> {
    let mut out = String::from("step,loss,lr\n");
    for p in curve {
        out.push_str(&format!("{},{:.8e},{:.8e}\n", p.step, p.loss, p.lr));
    }
    let mut f = std::fs::File::create(path).map_err(|e| ModelError::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| ModelError::io(path, e))
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Where intermediate and final checkpoints go.
    pub checkpoint_dir: Option<PathBuf>,
    pub progress: Option<Box<dyn FnMut(&CurvePoint) + 'a>>,
}

impl RunOptions<'_> {
    fn report(&mut self, p: &CurvePoint) {
        if let Some(f) = self.progress.as_mut() {
            f(p);
        }
    }
}

pub struct PretrainOutcome {
    pub model: Model,
    pub codebook: Codebook,
    pub curve: Vec<CurvePoint>,
    /// Mean cross-entropy on the fixed evaluation batches before and after training.
    pub initial_ce: f64,
    pub final_ce: f64,
}

pub struct PosttrainOutcome {
    pub model: Model,
    pub curve: Vec<CurvePoint>,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

struct Divergence {
    reference: Option<f64>,
    run: usize,
}

impl Divergence {
    fn check(&mut self, step: usize, loss: f64) -> Result<(), ModelError> {
        if !loss.is_finite() {
            return Err(ModelError::Diverged(format!("non-finite loss at step {step}")));
        }
        let reference = *self.reference.get_or_insert(loss);
        self.run = if loss > 10.0 * reference { self.run + 1 } else { 0 };
        if self.run >= DIVERGENCE_PATIENCE {
            return Err(ModelError::Diverged(format!("loss above 10x initial for {} steps at step {step}", self.run)));
        }
        Ok(())
    }
}

fn fixed_items(cfg: &TrainConfig, n_clips: usize) -> Vec<Vec<BatchItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00ce_e7a1);
    (0..CE_EVAL_BATCHES).map(|_| sample_batch(n_clips, cfg.batch_size, &cfg.fps_choices, &mut rng)).collect()
}

/// Mean cross-entropy over the given batches.
pub fn mean_ce(model: &Model, source: &mut ClipSource, batches: &[Vec<BatchItem>]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for items in batches {
        let batch = source.assemble(items, model.device())?;
        let codes = batch.codes.ok_or_else(|| ModelError::Codebook("no codebook attached".into()))?;
        total += model.pretrain_loss(&batch.input, &codes)?.to_scalar::<f32>()? as f64;
    }
    Ok(total / batches.len() as f64)
}

/// Fits a codebook on patches drawn from `source` at each clip's stored frame rate.
pub fn fit_source_codebook(cfg: &TrainConfig, source: &mut ClipSource) -> Result<Codebook, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0c0d_eb00);
    let patches = source.sample_patches(cfg.codebook_samples, &mut rng)?;
    Ok(fit_codebook(&patches, cfg.model.codebook_size, LLOYD_ITERATIONS, cfg.seed)?.codebook)
}

fn check_stage(cfg: &TrainConfig, stage: Stage) -> Result<(), ModelError> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(ModelError::Config(format!("config stage is {:?}, expected {stage:?}", cfg.stage)));
    }
    Ok(())
}

fn check_source(cfg: &TrainConfig, source: &ClipSource) -> Result<(), ModelError> {
    if source.is_empty() {
        return Err(ModelError::Config("no training clips".into()));
    }
    if source.frames_per_clip() != cfg.model.clip_frames {
        return Err(ModelError::Config(format!("clips have {} frames, model expects {}", source.frames_per_clip(), cfg.model.clip_frames)));
    }
    Ok(())
}

/// Latent action pretraining. Uses `codebook` when given, otherwise fits one on `source`.
pub fn run_pretrain(
    cfg: &TrainConfig,
    source: &mut ClipSource,
    codebook: Option<Codebook>,
    device: &Device,
    opts: &mut RunOptions,
) -> Result<PretrainOutcome, ModelError> {
    check_stage(cfg, Stage::Pretrain)?;
    check_source(cfg, source)?;
    let codebook = match codebook {
        Some(cb) => cb,
        None => fit_source_codebook(cfg, source)?,
    };
    if codebook.k != cfg.model.codebook_size || codebook.dim != cfg.model.patch_dim() {
        return Err(ModelError::Codebook(format!("codebook is {}x{}, config wants {}x{}", codebook.k, codebook.dim, cfg.model.codebook_size, cfg.model.patch_dim())));
    }
    source.set_codebook(codebook.clone())?;
    let model = Model::new(&cfg.model, cfg.seed, device)?;
    let eval_items = fixed_items(cfg, source.len());
    let initial_ce = mean_ce(&model, source, &eval_items)?;

    let vars: Vec<Var> = model.backbone_vars().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(vars, cfg.weight_decay, cfg.grad_clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut guard = Divergence { reference: Some(initial_ce), run: 0 };
    for step in 1..=cfg.steps {
        let items = sample_batch(source.len(), cfg.batch_size, &cfg.fps_choices, &mut rng);
        let batch = source.assemble(&items, device)?;
        let codes = batch.codes.expect("codebook attached");
        let loss = model.pretrain_loss(&batch.input, &codes)?;
        let value = loss.to_scalar::<f32>()? as f64;
        guard.check(step, value)?;
        let lr = lr_at(step, cfg);
        opt.step(&loss.backward()?, lr)?;
        let point = CurvePoint { step, loss: value, lr };
        opts.report(&point);
        curve.push(point);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                save_checkpoint(&dir.join(format!("step_{step:06}")), &model, cfg, step, Some(&codebook))?;
            }
        }
    }
    let final_ce = mean_ce(&model, source, &eval_items)?;
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&dir.join("final"), &model, cfg, cfg.steps, Some(&codebook))?;
        write_curve_csv(&dir.join("loss.csv"), &curve)?;
    }
    Ok(PretrainOutcome { model, codebook, curve, initial_ce, final_ce })
}

/// Where post-training takes its backbone from.
pub enum Backbone<'a> {
    /// Seeded random initialization.
    Random,
    Pretrained(&'a Model),
    Checkpoint(&'a Path),
}

/// Pose post-training. With a frozen backbone only `pose_head.*` parameters change and latents
/// are computed once per (clip, fps).
pub fn run_posttrain(
    cfg: &TrainConfig,
    source: &mut ClipSource,
    backbone: Backbone,
    device: &Device,
    opts: &mut RunOptions,
) -> Result<PosttrainOutcome, ModelError> {
    check_stage(cfg, Stage::Posttrain)?;
    check_source(cfg, source)?;
    let model = Model::new(&cfg.model, cfg.seed, device)?;
    let mut codebook = None;
    match backbone {
        Backbone::Random => {}
        Backbone::Pretrained(m) => {
            model.copy_from(m, false)?;
        }
        Backbone::Checkpoint(dir) => {
            let (m, _, cb) = load_checkpoint(dir, device)?;
            model.copy_from(&m, false)?;
            codebook = cb;
        }
    }
    let hash_before = model.backbone_hash()?;
    let vars: Vec<Var> = if cfg.freeze_backbone {
        model.head_vars().into_iter().map(|(_, v)| v).collect()
    } else {
        model.vs.entries().iter().filter(|(n, _)| !n.starts_with("fdm.")).map(|(_, v)| v.clone()).collect()
    };
    let mut opt = AdamW::new(vars, cfg.weight_decay, cfg.grad_clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9057);
    let mut latent_cache: HashMap<(usize, u64), Tensor> = HashMap::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut guard = Divergence { reference: None, run: 0 };
    for step in 1..=cfg.steps {
        let items = sample_batch(source.len(), cfg.batch_size, &cfg.fps_choices, &mut rng);
        let gts: Vec<_> = items.iter().map(|it| source.ground_truth(it.clip, it.fps)).collect::<Result<_, _>>()?;
        let pairs: Vec<_> = gts.iter().map(|g| (&g.normalized, g.scale)).collect();
        let targets = PoseTargets::new(&pairs, device, model.vs.dtype())?;
        let raw = if cfg.freeze_backbone {
            let missing: Vec<BatchItem> = items.iter().filter(|it| !latent_cache.contains_key(&(it.clip, it.fps.to_bits()))).copied().collect();
            if !missing.is_empty() {
                let batch = source.assemble(&missing, device)?;
                let actions = model.infer_latents(&batch.input)?.actions.detach();
                for (i, it) in missing.iter().enumerate() {
                    latent_cache.insert((it.clip, it.fps.to_bits()), actions.get(i)?);
                }
            }
            let rows: Vec<Tensor> = items.iter().map(|it| latent_cache[&(it.clip, it.fps.to_bits())].clone()).collect();
            model.pose_head.forward(&Tensor::stack(&rows, 0)?)?
        } else {
            let batch = source.assemble(&items, device)?;
            model.predict_pose(&batch.input)?.0
        };
        let loss = posttrain_loss(&raw, &targets, &cfg.loss_weights)?.total;
        let value = loss.to_scalar::<f32>()? as f64;
        guard.check(step, value)?;
        let lr = lr_at(step, cfg);
        opt.step(&loss.backward()?, lr)?;
        let point = CurvePoint { step, loss: value, lr };
        opts.report(&point);
        curve.push(point);
        if let Some(dir) = &opts.checkpoint_dir {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.steps {
                save_checkpoint(&dir.join(format!("step_{step:06}")), &model, cfg, step, codebook.as_ref())?;
            }
        }
    }
    let hash_after = model.backbone_hash()?;
    if let Some(dir) = &opts.checkpoint_dir {
        save_checkpoint(&dir.join("final"), &model, cfg, cfg.steps, codebook.as_ref())?;
        write_curve_csv(&dir.join("loss.csv"), &curve)?;
    }
    Ok(PosttrainOutcome { model, curve, backbone_hash_before: hash_before, backbone_hash_after: hash_after })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use lapose_core::synthworld::{sample_clip_specs, DatasetConfig, Split};

    fn tiny_model() -> ModelConfig {
        ModelConfig { d_model: 16, heads: 2, encoder_layers: 1, idm_layers: 1, fdm_layers: 1, pose_layers: 1, codebook_size: 16, ..ModelConfig::default() }
    }

    fn source() -> ClipSource {
        ClipSource::new(sample_clip_specs(&DatasetConfig::new(4, Split::Train, 2)).unwrap(), 16, 8)
    }

    fn pre_cfg() -> TrainConfig {
        TrainConfig { steps: 6, batch_size: 2, warmup_steps: 2, peak_lr: 3e-3, end_lr: 1e-3, codebook_samples: 2000, model: tiny_model(), seed: 4, ..TrainConfig::pretrain() }
    }

    #[test]
    fn pretrain_is_deterministic_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut opts = RunOptions { checkpoint_dir: Some(dir.path().to_path_buf()), ..Default::default() };
        let a = run_pretrain(&pre_cfg(), &mut source(), None, &Device::Cpu, &mut opts).unwrap();
        let b = run_pretrain(&pre_cfg(), &mut source(), Some(a.codebook.clone()), &Device::Cpu, &mut RunOptions::default()).unwrap();
        assert_eq!(a.curve, b.curve);
        assert!((a.initial_ce - (16f64).ln()).abs() < 1e-4, "{}", a.initial_ce);
        let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("step,loss,lr\n1,"));
        let (m, manifest, cb) = load_checkpoint(&dir.path().join("final"), &Device::Cpu).unwrap();
        assert_eq!(manifest.step, 6);
        assert_eq!(cb.unwrap(), a.codebook);
        assert_eq!(m.backbone_hash().unwrap(), a.model.backbone_hash().unwrap());
    }

    #[test]
    fn frozen_posttrain_only_moves_the_head() {
        let pre = run_pretrain(&pre_cfg(), &mut source(), None, &Device::Cpu, &mut RunOptions::default()).unwrap();
        let cfg = TrainConfig { steps: 5, batch_size: 3, warmup_steps: 1, peak_lr: 1e-3, model: tiny_model(), seed: 4, ..TrainConfig::posttrain() };
        let out = run_posttrain(&cfg, &mut source(), Backbone::Pretrained(&pre.model), &Device::Cpu, &mut RunOptions::default()).unwrap();
        assert_eq!(out.backbone_hash_before, out.backbone_hash_after);
        assert_eq!(out.backbone_hash_before, pre.model.backbone_hash().unwrap());
        let head_before = Model::hash_vars(&Model::new(&cfg.model, cfg.seed, &Device::Cpu).unwrap().head_vars()).unwrap();
        assert_ne!(Model::hash_vars(&out.model.head_vars()).unwrap(), head_before);

        let unfrozen = TrainConfig { freeze_backbone: false, ..cfg.clone() };
        let out = run_posttrain(&unfrozen, &mut source(), Backbone::Random, &Device::Cpu, &mut RunOptions::default()).unwrap();
        assert_ne!(out.backbone_hash_before, out.backbone_hash_after);
    }

    #[test]
    fn frozen_cache_matches_full_forward() {
        // a frozen run with cached latents follows the same curve as recomputing them each step
        let cfg = TrainConfig { steps: 3, batch_size: 2, warmup_steps: 1, model: tiny_model(), seed: 8, ..TrainConfig::posttrain() };
        let a = run_posttrain(&cfg, &mut source(), Backbone::Random, &Device::Cpu, &mut RunOptions::default()).unwrap();
        let model = Model::new(&cfg.model, cfg.seed, &Device::Cpu).unwrap();
        let mut src = source();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9057);
        let items = sample_batch(src.len(), 2, &cfg.fps_choices, &mut rng);
        let batch = src.assemble(&items, &Device::Cpu).unwrap();
        let gts: Vec<_> = items.iter().map(|it| src.ground_truth(it.clip, it.fps).unwrap()).collect();
        let pairs: Vec<_> = gts.iter().map(|g| (&g.normalized, g.scale)).collect();
        let targets = PoseTargets::new(&pairs, &Device::Cpu, model.vs.dtype()).unwrap();
        let raw = model.predict_pose(&batch.input).unwrap().0;
        let loss = posttrain_loss(&raw, &targets, &cfg.loss_weights).unwrap().total.to_scalar::<f32>().unwrap() as f64;
        assert!((loss - a.curve[0].loss).abs() <= 1e-6 * loss.abs(), "{loss} vs {}", a.curve[0].loss);
    }

    #[test]
    fn stage_and_divergence_guards() {
        let cfg = TrainConfig { stage: Stage::Posttrain, ..pre_cfg() };
        assert!(matches!(run_pretrain(&cfg, &mut source(), None, &Device::Cpu, &mut RunOptions::default()), Err(ModelError::Config(_))));
        let mut g = Divergence { reference: Some(1.0), run: 0 };
        for s in 0..DIVERGENCE_PATIENCE - 1 {
            g.check(s, 11.0).unwrap();
        }
        g.check(0, 2.0).unwrap();
        assert_eq!(g.run, 0);
        for s in 0..DIVERGENCE_PATIENCE - 1 {
            g.check(s, 11.0).unwrap();
        }
        assert!(g.check(9, 11.0).is_err());
        assert!(g.check(0, f64::NAN).is_err());
    }
}
