//! Inference over clip sources: pose evaluation reports and latent features for probing.

use candle_core::DType;
use lapose_core::metrics::report::{bucketed_report, evaluate_clip, fps_row, ClipEval, ClipEvalInput, EvalReport};
use lapose_core::synthworld::MotionKind;

use crate::data::{BatchItem, ClipSource};
use crate::model::Model;
use crate::pose_head::PosePrediction;
use crate::ModelError;

/// Probe classes, in label order.
pub const PROBE_CLASSES: [MotionKind; 4] = [MotionKind::Straight, MotionKind::LeftTurn, MotionKind::RightTurn, MotionKind::Reverse];

pub fn probe_label(kind: MotionKind) -> Option<usize> {
    PROBE_CLASSES.iter().position(|k| *k == kind)
}

pub struct ClipPrediction {
    pub clip: usize,
    pub fps: f64,
    pub pose: PosePrediction,
    /// Uncompressed latent actions averaged over steps.
    pub mean_latent: Vec<f64>,
}

/// Runs every clip of `source` at `fps` through the model in batches.
pub fn predict_all(model: &Model, source: &mut ClipSource, fps: f64, batch_size: usize) -> Result<Vec<ClipPrediction>, ModelError> {
    let mut out = Vec::with_capacity(source.len());
    let clips: Vec<usize> = (0..source.len()).collect();
    for chunk in clips.chunks(batch_size.max(1)) {
        let items: Vec<BatchItem> = chunk.iter().map(|&clip| BatchItem { clip, fps }).collect();
        let batch = source.assemble(&items, model.device())?;
        let (raw, latents) = model.predict_pose(&batch.input)?;
        let poses = PosePrediction::decode(&raw)?;
        let means: Vec<Vec<f64>> = latents.actions.mean(1)?.to_dtype(DType::F64)?.to_vec2()?;
        for ((&clip, pose), mean_latent) in chunk.iter().zip(poses).zip(means) {
            out.push(ClipPrediction { clip, fps, pose, mean_latent });
        }
    }
    Ok(out)
}

/// Per-clip metrics against metric ground truth at `fps`.
pub fn evaluate_at(model: &Model, source: &mut ClipSource, fps: f64, batch_size: usize) -> Result<Vec<ClipEval>, ModelError> {
    let preds = predict_all(model, source, fps, batch_size)?;
    preds
        .iter()
        .map(|p| {
            let spec = &source.specs()[p.clip];
            let gt = source.ground_truth(p.clip, fps)?;
            let seq = p.pose.to_sequence(fps);
            Ok(evaluate_clip(&ClipEvalInput {
                clip_id: spec.clip_id(),
                motion_kind: spec.motion.kind,
                fps,
                pred: &seq,
                pred_scale: p.pose.scale,
                gt: &gt.metric,
            })?)
        })
        .collect()
}

/// Full report at `fps`, with one summary row per frame rate in `sweep`.
pub fn evaluate(model: &Model, source: &mut ClipSource, fps: f64, sweep: &[f64], batch_size: usize) -> Result<EvalReport, ModelError> {
    let clips = evaluate_at(model, source, fps, batch_size)?;
    let mut rows = Vec::with_capacity(sweep.len());
    for &f in sweep {
        let row = if f == fps { fps_row(f, &clips) } else { fps_row(f, &evaluate_at(model, source, f, batch_size)?) };
        rows.push(row);
    }
    Ok(bucketed_report(clips, rows)?)
}

/// Mean latent features and labels for clips whose motion is one of [`PROBE_CLASSES`].
pub fn probe_features(model: &Model, source: &mut ClipSource, fps: f64, batch_size: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>), ModelError> {
    let preds = predict_all(model, source, fps, batch_size)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for p in preds {
        if let Some(label) = probe_label(source.specs()[p.clip].motion.kind) {
            features.push(p.mean_latent);
            labels.push(label);
        }
    }
    Ok((features, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use candle_core::Device;
    use lapose_core::synthworld::{sample_clip_specs, DatasetConfig, Split};

    #[test]
    fn batching_does_not_change_predictions() {
        let cfg = ModelConfig { d_model: 16, heads: 2, encoder_layers: 1, idm_layers: 1, fdm_layers: 1, pose_layers: 1, ..ModelConfig::default() };
        let model = Model::new(&cfg, 3, &Device::Cpu).unwrap();
        let specs = sample_clip_specs(&DatasetConfig::new(3, Split::Eval, 1)).unwrap();
        let mut src = ClipSource::new(specs, 16, 8);
        let a = predict_all(&model, &mut src, 2.0, 3).unwrap();
        let b = predict_all(&model, &mut src, 2.0, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.clip, y.clip);
            for (u, v) in x.mean_latent.iter().zip(&y.mean_latent) {
                assert!((u - v).abs() < 1e-5);
            }
        }
        let report = evaluate(&model, &mut src, 2.0, &[4.0, 2.0], 3).unwrap();
        assert_eq!(report.clips.len(), 3);
        assert_eq!(report.fps_sweep.len(), 2);
        assert_eq!(report.fps_sweep[1].mean_auc5, report.aggregate.mean_auc5);
    }

    #[test]
    fn probe_labels() {
        assert_eq!(probe_label(MotionKind::Reverse), Some(3));
        assert_eq!(probe_label(MotionKind::SCurve), None);
    }
}
