//! Pairwise pose accuracy and aligned trajectory error.

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::geometry::{
    compose_trajectory, normalize_translations, quat_geodesic_deg, translation_angle_deg, umeyama_se3, MetricScale,
    PoseSequence, RigidAlignment, Trajectory, Vec3, DEGENERATE_NORM, SCALE_EPSILON,
};

/// Upper end of the error range the AUC integrates over, in degrees.
pub const AUC_THRESHOLD_DEG: f64 = 5.0;
/// Clips whose ground-truth mean step is below this many meters are excluded from ATE-S.
pub const STATIONARY_THRESHOLD_M: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub i: usize,
    pub j: usize,
    pub rotation_deg: f64,
    pub translation_deg: f64,
}

impl PairError {
    /// A pair counts only as well as its worse component.
    pub fn combined(&self) -> f64 {
        self.rotation_deg.max(self.translation_deg)
    }
}

/// Rotation and translation-direction errors for every frame pair `i < j`. Pairs whose
/// ground-truth translation is degenerate are dropped and counted; a degenerate predicted
/// translation against a well-defined ground truth scores the maximal 180 degrees.
pub fn pairwise_errors(pred: &PoseSequence, gt: &PoseSequence) -> Result<(Vec<PairError>, usize), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if gt.is_empty() {
        return Err(MetricError::InvalidInput("empty pose sequence".into()));
    }
    let gt_norm = if gt.is_normalized { gt.clone() } else { normalize_translations(gt, SCALE_EPSILON)?.0 };
    let tp = compose_trajectory(pred, None);
    let tg = compose_trajectory(&gt_norm, None);
    let n = tg.len();
    let mut errors = Vec::with_capacity(n * (n - 1) / 2);
    let mut skipped = 0;
    for i in 0..n {
        for j in i + 1..n {
            let rp = tp.relative_between(i, j)?;
            let rg = tg.relative_between(i, j)?;
            if rg.translation.norm() <= DEGENERATE_NORM {
                skipped += 1;
                continue;
            }
            let translation_deg = translation_angle_deg(&rp.translation, &rg.translation).unwrap_or(180.0);
            errors.push(PairError { i, j, rotation_deg: quat_geodesic_deg(rp.rotation, rg.rotation), translation_deg });
        }
    }
    Ok((errors, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    /// Percent in [0, 100].
    pub auc: f64,
    pub valid_pairs: usize,
    pub skipped_pairs: usize,
}

/// Area under the cumulative pairwise error curve up to `threshold` degrees, as a percent.
/// Integrating the accuracy curve with uniform weight equals the mean clamped linear credit
/// `max(0, (threshold - e) / threshold)`.
pub fn auc_from_errors(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return f64::NAN;
    }
    let credit: f64 = errors.iter().map(|e| ((threshold - e) / threshold).max(0.0)).sum();
    100.0 * credit / errors.len() as f64
}

pub fn auc5(pred: &PoseSequence, gt: &PoseSequence) -> Result<AucResult, MetricError> {
    let (errors, skipped) = pairwise_errors(pred, gt)?;
    if errors.is_empty() {
        return Err(MetricError::Undefined(format!("all {skipped} frame pairs are degenerate")));
    }
    let combined: Vec<f64> = errors.iter().map(PairError::combined).collect();
    Ok(AucResult { auc: auc_from_errors(&combined, AUC_THRESHOLD_DEG), valid_pairs: errors.len(), skipped_pairs: skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentStatus {
    Ok,
    /// Collinear trajectory; the residual is still minimal.
    RotationAmbiguous,
    /// Closed form failed; identity rotation with centroid matching was used instead.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteResult {
    pub rmse: f64,
    pub alignment: AlignmentStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ate {
    Value(AteResult),
    /// Near-stationary ground truth; the mean step length in meters is attached.
    Filtered { mean_step: f64 },
}

impl Ate {
    pub fn value(&self) -> Option<f64> {
        match self {
            Ate::Value(r) => Some(r.rmse),
            Ate::Filtered { .. } => None,
        }
    }
}

pub fn mean_step_norm(positions: &[Vec3]) -> f64 {
    if positions.len() < 2 {
        return 0.0;
    }
    positions.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>() / (positions.len() - 1) as f64
}

/// Rigidly aligns `pred` onto `gt` and returns the position RMSE.
pub fn aligned_rmse(pred: &[Vec3], gt: &[Vec3]) -> Result<AteResult, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let (alignment, status) = match umeyama_se3(pred, gt) {
        Ok(a) if a.rotation_ambiguous => (a, AlignmentStatus::RotationAmbiguous),
        Ok(a) => (a, AlignmentStatus::Ok),
        Err(crate::geometry::GeometryError::AlignmentFailure(_)) => {
            let n = pred.len().max(1) as f64;
            let mp = pred.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
            let mg = gt.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
            (RigidAlignment { translation: mg - mp, ..RigidAlignment::identity() }, AlignmentStatus::Failed)
        }
        Err(e) => return Err(e.into()),
    };
    Ok(AteResult { rmse: alignment.rmse(pred, gt), alignment: status })
}

fn unit_magnitude(positions: &[Vec3]) -> Vec<Vec3> {
    let s = mean_step_norm(positions);
    if s > 0.0 {
        positions.iter().map(|p| p / s).collect()
    } else {
        positions.to_vec()
    }
}

/// Scale-free trajectory error. `gt` must be metric so the stationary filter applies in meters.
pub fn ate_s(pred: &Trajectory, gt: &Trajectory) -> Result<Ate, MetricError> {
    let mean_step = mean_step_norm(&gt.positions);
    if mean_step < STATIONARY_THRESHOLD_M {
        return Ok(Ate::Filtered { mean_step });
    }
    aligned_rmse(&unit_magnitude(&pred.positions), &unit_magnitude(&gt.positions)).map(Ate::Value)
}

/// Metric trajectory error: predicted normalized steps are scaled by the predicted metric
/// scale and rigidly aligned; nothing is renormalized.
pub fn ate_m(pred_normalized: &PoseSequence, pred_scale: f64, gt: &Trajectory) -> Result<AteResult, MetricError> {
    let traj = compose_trajectory(pred_normalized, Some(MetricScale(pred_scale)));
    aligned_rmse(&traj.positions, &gt.positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Quaternion, RelativePose};
    use approx::assert_abs_diff_eq;

    fn seq(steps: Vec<([f64; 3], f64)>) -> PoseSequence {
        PoseSequence::new(
            steps
                .into_iter()
                .map(|(t, yaw)| RelativePose::new(Vec3::new(t[0], t[1], t[2]), Quaternion::from_yaw(yaw), 1.0).unwrap())
                .collect(),
            2.0,
        )
        .unwrap()
    }

    fn curvy() -> PoseSequence {
        seq((0..6).map(|i| ([0.3 * i as f64, 0.1, 2.0], 0.05 * i as f64)).collect())
    }

    #[test]
    fn perfect_prediction_scores_100() {
        let g = curvy();
        let (n, _) = normalize_translations(&g, 1.0).unwrap();
        let r = auc5(&n, &g).unwrap();
        assert_abs_diff_eq!(r.auc, 100.0, epsilon = 1e-9);
        assert_eq!(r.valid_pairs, 21);
    }

    #[test]
    fn constant_error_gives_linear_credit() {
        assert_abs_diff_eq!(auc_from_errors(&[2.5; 10], 5.0), 50.0, epsilon = 1e-12);
        assert_eq!(auc_from_errors(&[5.0, 7.0, 180.0], 5.0), 0.0);
    }

    #[test]
    fn constant_rotation_error_on_every_pair() {
        // Every predicted step points 2.5 degrees off the straight ground truth, so every
        // pair direction is off by exactly that much while rotations stay exact.
        let g = seq(vec![([0.0, 0.0, 1.0], 0.0); 5]);
        let a = 2.5f64.to_radians();
        let p = seq(vec![([a.sin(), 0.0, a.cos()], 0.0); 5]);
        let r = auc5(&p, &g).unwrap();
        assert_abs_diff_eq!(r.auc, 50.0, epsilon = 1e-9);
    }

    #[test]
    fn large_errors_score_zero() {
        let g = seq(vec![([0.0, 0.0, 1.0], 0.0); 4]);
        let p = seq(vec![([1.0, 0.0, 0.0], 0.0); 4]);
        assert_eq!(auc5(&p, &g).unwrap().auc, 0.0);
    }

    #[test]
    fn degenerate_pairs_are_skipped_or_penalized() {
        let g = seq(vec![([0.0, 0.0, 0.0], 0.0), ([0.0, 0.0, 1.0], 0.0)]);
        let r = auc5(&g, &g).unwrap();
        assert_eq!(r.skipped_pairs, 1);
        assert_eq!(r.valid_pairs, 2);
        let still = seq(vec![([0.0, 0.0, 0.0], 0.0); 3]);
        assert!(matches!(auc5(&still, &still), Err(MetricError::Undefined(_))));
        let zero_pred = seq(vec![([0.0, 0.0, 0.0], 0.0); 2]);
        let moving = seq(vec![([0.0, 0.0, 1.0], 0.0); 2]);
        assert_eq!(auc5(&zero_pred, &moving).unwrap().auc, 0.0);
        assert!(auc5(&zero_pred, &curvy()).is_err());
    }

    #[test]
    fn ate_examples() {
        let g = compose_trajectory(&curvy(), None);
        assert!(ate_s(&g, &g).unwrap().value().unwrap() < 1e-12);
        let moved = g.transformed(Quaternion::from_axis_angle(Vec3::new(0.2, 1.0, -0.4), 1.3), &Vec3::new(3.0, -2.0, 7.0));
        assert_abs_diff_eq!(ate_s(&moved, &g).unwrap().value().unwrap(), 0.0, epsilon = 1e-8);
        let scaled = Trajectory { positions: g.positions.iter().map(|p| p * 3.7).collect(), ..g.clone() };
        assert_abs_diff_eq!(ate_s(&scaled, &g).unwrap().value().unwrap(), 0.0, epsilon = 1e-9);

        let stationary = compose_trajectory(&seq(vec![([0.0, 0.0, 0.05], 0.0); 15]), None);
        assert!(matches!(ate_s(&stationary, &stationary).unwrap(), Ate::Filtered { .. }));
    }

    #[test]
    fn ate_m_straight_path_closed_form() {
        let g = seq(vec![([0.0, 0.0, 1.0], 0.0); 15]);
        let gt = compose_trajectory(&g, None);
        assert_abs_diff_eq!(ate_m(&g, 1.0, &gt).unwrap().rmse, 0.0, epsilon = 1e-12);
        for c in [0.5, 2.0, 3.0] {
            // residual (c - 1)(k - mean k) after centroid alignment
            let expected = (c - 1.0f64).abs() * ((16.0f64 * 16.0 - 1.0) / 12.0).sqrt();
            let r = ate_m(&g, c, &gt).unwrap();
            assert_abs_diff_eq!(r.rmse, expected, epsilon = 1e-9);
            assert_eq!(r.alignment, AlignmentStatus::RotationAmbiguous);
        }
        assert!(ate_m(&g, 2.0, &gt).unwrap().rmse < ate_m(&g, 4.0, &gt).unwrap().rmse);
    }

    #[test]
    fn alignment_failure_falls_back_to_centroids() {
        let p = vec![Vec3::zeros(); 4];
        let g = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, 3.0), Vec3::new(0.0, 0.0, 4.0)];
        let r = aligned_rmse(&p, &g).unwrap();
        assert_eq!(r.alignment, AlignmentStatus::Failed);
        assert_abs_diff_eq!(r.rmse, (1.25f64).sqrt(), epsilon = 1e-12);
    }
}
