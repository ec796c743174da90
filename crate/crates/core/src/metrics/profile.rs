//! Curvature and acceleration profiles used to bucket clips by motion regime.

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::geometry::Trajectory;

/// Steps shorter than this (meters) carry no heading and are merged away.
const MIN_HEADING_STEP: f64 = 1e-6;

pub const CURVATURE_BINS: (f64, f64) = (0.01, 0.1);
pub const ACCEL_BINS: (f64, f64) = (0.3, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionBin {
    Small,
    Medium,
    Large,
}

impl MotionBin {
    pub const ALL: [MotionBin; 3] = [MotionBin::Small, MotionBin::Medium, MotionBin::Large];

    /// `< lo` small, `[lo, hi]` medium, `> hi` large.
    pub fn classify(value: f64, (lo, hi): (f64, f64)) -> Self {
        if value < lo {
            MotionBin::Small
        } else if value <= hi {
            MotionBin::Medium
        } else {
            MotionBin::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionBin::Small => "small",
            MotionBin::Medium => "medium",
            MotionBin::Large => "large",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub per_step: Vec<f64>,
    pub median_abs: f64,
    pub bin: MotionBin,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let w = a.rem_euclid(t);
    if w > std::f64::consts::PI {
        w - t
    } else {
        w
    }
}

/// Signed curvature `d psi / ds` at each interior point, with heading taken from step
/// directions projected onto the ground (xz) plane. Each value is the curvature of the circle
/// through three consecutive points, `2 sin(d psi) / |p_{k+1} - p_{k-1}|`, which is exact on
/// constant-curvature arcs.
pub fn curvature_profile(traj: &Trajectory) -> Result<Profile, MetricError> {
    if traj.len() < 3 {
        return Err(MetricError::InvalidInput(format!("need at least 3 positions, got {}", traj.len())));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(traj.len());
    for p in &traj.positions {
        let q = (p.x, p.z);
        match pts.last() {
            Some(&(x, z)) if ((q.0 - x).powi(2) + (q.1 - z).powi(2)).sqrt() < MIN_HEADING_STEP => {}
            _ => pts.push(q),
        }
    }
    let mut per_step = Vec::new();
    for w in pts.windows(3) {
        let (a, b, c) = (w[0], w[1], w[2]);
        let psi0 = (b.0 - a.0).atan2(b.1 - a.1);
        let psi1 = (c.0 - b.0).atan2(c.1 - b.1);
        let dpsi = wrap_angle(psi1 - psi0);
        let span = ((c.0 - a.0).powi(2) + (c.1 - a.1).powi(2)).sqrt();
        per_step.push(if span > 0.0 { 2.0 * dpsi.sin() / span } else { 0.0 });
    }
    let mut abs: Vec<f64> = per_step.iter().map(|k| k.abs()).collect();
    let median_abs = median(&mut abs);
    Ok(Profile { per_step, median_abs, bin: MotionBin::classify(median_abs, CURVATURE_BINS) })
}

/// Longitudinal acceleration magnitude from finite-differenced step speeds.
pub fn acceleration_profile(traj: &Trajectory, fps: f64) -> Result<Profile, MetricError> {
    if traj.len() < 3 {
        return Err(MetricError::InvalidInput(format!("need at least 3 positions, got {}", traj.len())));
    }
    if !(fps > 0.0) {
        return Err(MetricError::InvalidInput(format!("fps {fps} must be positive")));
    }
    let speeds: Vec<f64> = traj.positions.windows(2).map(|w| (w[1] - w[0]).norm() * fps).collect();
    let per_step: Vec<f64> = speeds.windows(2).map(|v| ((v[1] - v[0]) * fps).abs()).collect();
    let mut abs = per_step.clone();
    let median_abs = median(&mut abs);
    Ok(Profile { per_step, median_abs, bin: MotionBin::classify(median_abs, ACCEL_BINS) })
}

/// Positions along a straight line with the given per-frame distances from the origin.
#[cfg(test)]
pub(crate) fn line(distances: &[f64]) -> Trajectory {
    use crate::geometry::{Quaternion, Vec3};
    Trajectory {
        positions: distances.iter().map(|d| Vec3::new(0.0, 0.0, *d)).collect(),
        orientations: vec![Quaternion::IDENTITY; distances.len()],
        fov: 1.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_trajectory;
    use crate::synthworld::motion::{sample_motion, MotionKind, MotionSpec};
    use approx::assert_abs_diff_eq;

    fn circle(radius: f64) -> Trajectory {
        let spec = MotionSpec::new(MotionKind::RightTurn, 4.0, 1.0 / radius, 2.0);
        compose_trajectory(&sample_motion(&spec, 1.0).0, None)
    }

    #[test]
    fn straight_line_has_zero_curvature() {
        let p = curvature_profile(&line(&(0..16).map(|i| i as f64 * 2.0).collect::<Vec<_>>())).unwrap();
        assert!(p.per_step.iter().all(|k| *k == 0.0));
        assert_eq!(p.bin, MotionBin::Small);
    }

    #[test]
    fn circle_curvature_is_inverse_radius() {
        let p = curvature_profile(&circle(5.0)).unwrap();
        for k in &p.per_step {
            assert_abs_diff_eq!(*k, 0.2, epsilon = 1e-9);
        }
        assert_eq!(p.bin, MotionBin::Large);
        let p = curvature_profile(&circle(50.0)).unwrap();
        assert_abs_diff_eq!(p.median_abs, 0.02, epsilon = 1e-9);
        assert_eq!(p.bin, MotionBin::Medium);
    }

    #[test]
    fn left_turns_have_negative_curvature() {
        let spec = MotionSpec::new(MotionKind::LeftTurn, 4.0, -0.05, 2.0);
        let p = curvature_profile(&compose_trajectory(&sample_motion(&spec, 1.0).0, None)).unwrap();
        assert!(p.per_step.iter().all(|k| (*k + 0.05).abs() < 1e-9));
    }

    #[test]
    fn stationary_steps_are_skipped() {
        let p = curvature_profile(&line(&[0.0, 1.0, 1.0, 1.0, 2.0, 3.0])).unwrap();
        assert_eq!(p.per_step.len(), 2);
        assert!(curvature_profile(&line(&[0.0, 1.0])).is_err());
    }

    fn ramp(v0: f64, v1: f64, seconds: f64, fps: f64) -> Trajectory {
        let a = (v1 - v0) / seconds;
        let n = (seconds * fps).round() as usize;
        line(&(0..=n).map(|k| {
            let t = k as f64 / fps;
            v0 * t + 0.5 * a * t * t
        }).collect::<Vec<_>>())
    }

    #[test]
    fn acceleration_examples() {
        let p = acceleration_profile(&ramp(10.0, 10.0, 8.0, 2.0), 2.0).unwrap();
        assert!(p.per_step.iter().all(|a| a.abs() < 1e-12));
        assert_eq!(p.bin, MotionBin::Small);
        let p = acceleration_profile(&ramp(10.0, 14.0, 8.0, 2.0), 2.0).unwrap();
        assert_abs_diff_eq!(p.median_abs, 0.5, epsilon = 1e-9);
        assert_eq!(p.bin, MotionBin::Medium);
        let p = acceleration_profile(&ramp(10.0, 20.0, 8.0, 2.0), 2.0).unwrap();
        assert_abs_diff_eq!(p.median_abs, 1.25, epsilon = 1e-9);
        assert_eq!(p.bin, MotionBin::Large);
    }

    #[test]
    fn bin_edges() {
        assert_eq!(MotionBin::classify(0.00999, CURVATURE_BINS), MotionBin::Small);
        assert_eq!(MotionBin::classify(0.01, CURVATURE_BINS), MotionBin::Medium);
        assert_eq!(MotionBin::classify(0.1, CURVATURE_BINS), MotionBin::Medium);
        assert_eq!(MotionBin::classify(0.8000001, ACCEL_BINS), MotionBin::Large);
    }
}
