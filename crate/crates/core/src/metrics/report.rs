//! Per-clip evaluation and the aggregated report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::pose::{ate_m, ate_s, auc5, AlignmentStatus, Ate};
use super::profile::{acceleration_profile, curvature_profile, MotionBin};
use super::MetricError;
use crate::geometry::{compose_trajectory, compute_metric_scale, PoseSequence};
use crate::synthworld::MotionKind;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Frame rates of the robustness sweep.
pub const FPS_SWEEP: [f64; 4] = [4.0, 2.0, 1.3, 1.0];

#[derive(Debug, Clone)]
pub struct ClipEvalInput<'a> {
    pub clip_id: String,
    pub motion_kind: MotionKind,
    pub fps: f64,
    /// Predicted scale-free steps.
    pub pred: &'a PoseSequence,
    /// Predicted metric scale in meters.
    pub pred_scale: f64,
    /// Metric ground truth.
    pub gt: &'a PoseSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub clip_id: String,
    pub motion_kind: MotionKind,
    pub fps: f64,
    pub auc5: Option<f64>,
    pub valid_pairs: usize,
    pub skipped_pairs: usize,
    pub ate_s: Option<f64>,
    pub ate_m: Option<f64>,
    pub filtered: bool,
    pub filter_reason: Option<String>,
    pub alignment: AlignmentStatus,
    pub gt_scale: f64,
    pub pred_scale: f64,
    pub curvature: f64,
    pub curvature_bin: MotionBin,
    pub accel: f64,
    pub accel_bin: MotionBin,
}

pub fn evaluate_clip(input: &ClipEvalInput<'_>) -> Result<ClipEval, MetricError> {
    let gt_traj = compose_trajectory(input.gt, None);
    let pred_traj = compose_trajectory(input.pred, None);
    let (auc, valid_pairs, skipped_pairs) = match auc5(input.pred, input.gt) {
        Ok(r) => (Some(r.auc), r.valid_pairs, r.skipped_pairs),
        Err(MetricError::Undefined(_)) => (None, 0, input.gt.frame_count() * input.gt.len() / 2),
        Err(e) => return Err(e),
    };
    let (ate_s_value, filter_reason, status_s) = match ate_s(&pred_traj, &gt_traj)? {
        Ate::Value(r) => (Some(r.rmse), None, r.alignment),
        Ate::Filtered { mean_step } => {
            (None, Some(format!("near-stationary: mean step {mean_step:.4} m < 0.1 m")), AlignmentStatus::Ok)
        }
    };
    let m = ate_m(input.pred, input.pred_scale, &gt_traj)?;
    let alignment = match (status_s, m.alignment) {
        (AlignmentStatus::Failed, _) | (_, AlignmentStatus::Failed) => AlignmentStatus::Failed,
        (AlignmentStatus::RotationAmbiguous, _) | (_, AlignmentStatus::RotationAmbiguous) => {
            AlignmentStatus::RotationAmbiguous
        }
        _ => AlignmentStatus::Ok,
    };
    let curvature = curvature_profile(&gt_traj)?;
    let accel = acceleration_profile(&gt_traj, input.fps)?;
    Ok(ClipEval {
        clip_id: input.clip_id.clone(),
        motion_kind: input.motion_kind,
        fps: input.fps,
        auc5: auc,
        valid_pairs,
        skipped_pairs,
        ate_s: ate_s_value,
        ate_m: Some(m.rmse),
        filtered: filter_reason.is_some(),
        filter_reason,
        alignment,
        gt_scale: compute_metric_scale(&input.gt.translations())?.meters(),
        pred_scale: input.pred_scale,
        curvature: curvature.median_abs,
        curvature_bin: curvature.bin,
        accel: accel.median_abs,
        accel_bin: accel.bin,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub n_clips: usize,
    pub mean_auc5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsRow {
    pub fps: f64,
    pub n_clips: usize,
    pub mean_auc5: Option<f64>,
    pub mean_ate_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_clips: usize,
    pub mean_auc5: Option<f64>,
    pub median_auc5: Option<f64>,
    pub mean_ate_s: Option<f64>,
    pub mean_ate_m: Option<f64>,
    pub n_auc_undefined: usize,
    pub n_filtered: usize,
    pub n_alignment_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub aggregate: Aggregate,
    /// Only populated bins appear.
    pub by_curvature: BTreeMap<MotionBin, Bucket>,
    pub by_accel: BTreeMap<MotionBin, Bucket>,
    pub by_motion_kind: BTreeMap<MotionKind, Bucket>,
    pub fps_sweep: Vec<FpsRow>,
    pub auc_histogram: Vec<HistogramBin>,
    pub clips: Vec<ClipEval>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn bucket<'a>(clips: impl Iterator<Item = &'a ClipEval>) -> Bucket {
    let clips: Vec<&ClipEval> = clips.collect();
    Bucket { n_clips: clips.len(), mean_auc5: mean(clips.iter().filter_map(|c| c.auc5)) }
}

fn group<K: Ord + Copy>(clips: &[ClipEval], key: impl Fn(&ClipEval) -> K) -> BTreeMap<K, Bucket> {
    let mut keys: Vec<K> = clips.iter().map(&key).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().map(|k| (k, bucket(clips.iter().filter(|c| key(c) == k)))).collect()
}

pub fn fps_row(fps: f64, clips: &[ClipEval]) -> FpsRow {
    FpsRow {
        fps,
        n_clips: clips.len(),
        mean_auc5: mean(clips.iter().filter_map(|c| c.auc5)),
        mean_ate_s: mean(clips.iter().filter_map(|c| c.ate_s)),
    }
}

pub fn auc_histogram(clips: &[ClipEval], bins: usize) -> Vec<HistogramBin> {
    let width = 100.0 / bins as f64;
    let mut out: Vec<HistogramBin> =
        (0..bins).map(|i| HistogramBin { lo: i as f64 * width, hi: (i + 1) as f64 * width, count: 0 }).collect();
    for auc in clips.iter().filter_map(|c| c.auc5) {
        let i = ((auc / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// Aggregates per-clip results by curvature, acceleration and motion kind, attaching an
/// optional frame-rate sweep.
pub fn bucketed_report(clips: Vec<ClipEval>, fps_sweep: Vec<FpsRow>) -> Result<EvalReport, MetricError> {
    if clips.is_empty() {
        return Err(MetricError::InvalidInput("cannot build a report from zero clips".into()));
    }
    let mut aucs: Vec<f64> = clips.iter().filter_map(|c| c.auc5).collect();
    let aggregate = Aggregate {
        n_clips: clips.len(),
        mean_auc5: mean(aucs.iter().copied()),
        median_auc5: (!aucs.is_empty()).then(|| super::profile::median(&mut aucs)),
        mean_ate_s: mean(clips.iter().filter(|c| !c.filtered).filter_map(|c| c.ate_s)),
        mean_ate_m: mean(clips.iter().filter_map(|c| c.ate_m)),
        n_auc_undefined: clips.iter().filter(|c| c.auc5.is_none()).count(),
        n_filtered: clips.iter().filter(|c| c.filtered).count(),
        n_alignment_failed: clips.iter().filter(|c| c.alignment == AlignmentStatus::Failed).count(),
    };
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        aggregate,
        by_curvature: group(&clips, |c| c.curvature_bin),
        by_accel: group(&clips, |c| c.accel_bin),
        by_motion_kind: group(&clips, |c| c.motion_kind),
        fps_sweep,
        auc_histogram: auc_histogram(&clips, 10),
        clips,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// One row per clip.
    pub fn clips_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from(
            "clip_id,motion_kind,fps,auc5,valid_pairs,skipped_pairs,ate_s,ate_m,filtered,alignment,gt_scale,pred_scale,curvature,curvature_bin,accel,accel_bin\n",
        );
        for c in &self.clips {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{}",
                c.clip_id,
                c.motion_kind,
                c.fps,
                opt(c.auc5),
                c.valid_pairs,
                c.skipped_pairs,
                opt(c.ate_s),
                opt(c.ate_m),
                c.filtered,
                serde_json::to_value(c.alignment).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                c.gt_scale,
                c.pred_scale,
                c.curvature,
                c.curvature_bin.name(),
                c.accel,
                c.accel_bin.name()
            );
        }
        out
    }

    /// Frame-rate robustness table as aligned text.
    pub fn fps_table(&self) -> String {
        let mut out = String::from("FPS   | AUC@5 (%) | ATE-S\n------+-----------+--------\n");
        for r in &self.fps_sweep {
            let auc = r.mean_auc5.map(|v| format!("{v:9.2}")).unwrap_or_else(|| format!("{:>9}", "n/a"));
            let ate = r.mean_ate_s.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "{:<5.1} | {auc} | {ate}", r.fps);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize_translations, SCALE_EPSILON};
    use crate::synthworld::motion::{sample_motion, MotionSpec};

    fn clip(kind: MotionKind, curvature: f64) -> (PoseSequence, PoseSequence, f64) {
        let spec = MotionSpec::new(kind, 8.0, curvature, 2.0);
        let gt = sample_motion(&spec, 1.0).0;
        let (pred, s) = normalize_translations(&gt, SCALE_EPSILON).unwrap();
        (gt, pred, s.divisor(SCALE_EPSILON))
    }

    fn eval(id: &str, kind: MotionKind, curvature: f64) -> ClipEval {
        let (gt, pred, s) = clip(kind, curvature);
        evaluate_clip(&ClipEvalInput { clip_id: id.into(), motion_kind: kind, fps: 2.0, pred: &pred, pred_scale: s, gt: &gt })
            .unwrap()
    }

    #[test]
    fn perfect_clip_evaluation() {
        let e = eval("a", MotionKind::RightTurn, 0.05);
        assert!((e.auc5.unwrap() - 100.0).abs() < 1e-9);
        assert!(e.ate_s.unwrap() < 1e-9);
        assert!(e.ate_m.unwrap() < 1e-9);
        assert_eq!(e.curvature_bin, MotionBin::Medium);
        assert!(!e.filtered);
    }

    #[test]
    fn single_straight_clip_populates_one_bin() {
        let r = bucketed_report(vec![eval("a", MotionKind::Straight, 0.0)], vec![]).unwrap();
        assert_eq!(r.by_curvature.len(), 1);
        assert!(r.by_curvature.contains_key(&MotionBin::Small));
        assert_eq!(r.aggregate.n_clips, 1);
        assert_eq!(r.auc_histogram.iter().map(|b| b.count).sum::<usize>(), 1);
        assert_eq!(r.auc_histogram[9].count, 1);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(bucketed_report(vec![], vec![]).is_err());
    }

    #[test]
    fn stationary_clip_is_filtered_from_ate_s() {
        let gt = sample_motion(&MotionSpec::new(MotionKind::Straight, 0.1, 0.0, 2.0), 1.0).0;
        let (pred, _) = normalize_translations(&gt, SCALE_EPSILON).unwrap();
        let e = evaluate_clip(&ClipEvalInput {
            clip_id: "s".into(),
            motion_kind: MotionKind::Straight,
            fps: 2.0,
            pred: &pred,
            pred_scale: 1.0,
            gt: &gt,
        })
        .unwrap();
        assert!(e.filtered);
        assert!(e.ate_s.is_none());
        let moving = eval("m", MotionKind::Straight, 0.0);
        let r = bucketed_report(vec![e, moving], vec![]).unwrap();
        assert_eq!(r.aggregate.n_filtered, 1);
    }

    #[test]
    fn json_has_stable_layout() {
        let r = bucketed_report(
            vec![eval("a", MotionKind::Straight, 0.0), eval("b", MotionKind::LeftTurn, -0.2)],
            vec![fps_row(2.0, &[])],
        )
        .unwrap();
        let text = r.to_json();
        assert_eq!(EvalReport::from_json(&text).unwrap(), r);
        assert!(text.find("\"schema_version\"").unwrap() < text.find("\"aggregate\"").unwrap());
        assert_eq!(text, r.to_json());
        assert_eq!(r.clips_csv().lines().count(), 3);
        assert!(r.fps_table().contains("n/a"));
    }
}
