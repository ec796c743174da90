//! Pose, rotation and alignment math shared by the generator, the models and the metrics.
//!
//! Camera axes are x right, y down, z forward. A [`RelativePose`] for step `t` is the pose of
//! frame `t + 1` expressed in the camera coordinates of frame `t`, so composing steps maps
//! camera-to-world: `R_{t+1} = R_t * R_rel`, `p_{t+1} = p_t + R_t * t_rel`.

use nalgebra::{Matrix3, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;

/// Translation norm at or below which a direction is considered undefined.
pub const DEGENERATE_NORM: f64 = 1e-3;

/// Clamp used when dividing translations by the metric scale.
pub const SCALE_EPSILON: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("quaternion has zero norm")]
    InvalidRotation,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("frame indices ({i}, {j}) out of range for {len} frames")]
    IndexOutOfRange { i: usize, j: usize, len: usize },
    #[error("alignment failed: {0}")]
    AlignmentFailure(String),
}

/// Rotation quaternion stored as (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(axis);
        Self::from_unit(&UnitQuaternion::from_axis_angle(&axis, angle))
    }

    /// Rotation about the camera y axis (down), i.e. a yaw to the right for positive angles.
    pub fn from_yaw(angle: f64) -> Self {
        let h = 0.5 * angle;
        Self::new(h.cos(), 0.0, h.sin(), 0.0)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit norm, `w >= 0`; a tie at `w == 0` is broken by making the first nonzero
    /// component positive.
    pub fn canonicalize(self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(GeometryError::InvalidRotation);
        }
        let q = [self.w / n, self.x / n, self.y / n, self.z / n];
        let sign = match q.iter().find(|c| **c != 0.0) {
            Some(c) if *c < 0.0 => -1.0,
            _ => 1.0,
        };
        Ok(Self::new(sign * q[0], sign * q[1], sign * q[2], sign * q[3]))
    }

    pub fn from_unit(u: &UnitQuaternion<f64>) -> Self {
        let q = u.quaternion();
        Self::new(q.w, q.i, q.j, q.k)
            .canonicalize()
            .expect("unit quaternion has nonzero norm")
    }

    /// Normalizing conversion into nalgebra's unit quaternion.
    pub fn to_unit(self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(self.w, self.x, self.y, self.z))
    }

    pub fn compose(self, rhs: Quaternion) -> Quaternion {
        Self::from_unit(&(self.to_unit() * rhs.to_unit()))
    }

    pub fn inverse(self) -> Quaternion {
        Self::from_unit(&self.to_unit().inverse())
    }

    pub fn rotate(self, v: &Vec3) -> Vec3 {
        self.to_unit() * v
    }

    pub fn to_matrix(self) -> Matrix3<f64> {
        self.to_unit().to_rotation_matrix().into_inner()
    }

    /// Closed-form conversion of a rotation matrix (Shepperd's branch selection).
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, GeometryError> {
        let tr = m.trace();
        let diag = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        let q = if tr >= diag[0].max(diag[1]).max(diag[2]) {
            let s = 2.0 * (1.0 + tr).sqrt();
            Self::new(0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s)
        } else if diag[0] >= diag[1] && diag[0] >= diag[2] {
            let s = 2.0 * (1.0 + diag[0] - diag[1] - diag[2]).sqrt();
            Self::new((m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s)
        } else if diag[1] >= diag[2] {
            let s = 2.0 * (1.0 + diag[1] - diag[0] - diag[2]).sqrt();
            Self::new((m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s)
        } else {
            let s = 2.0 * (1.0 + diag[2] - diag[0] - diag[1]).sqrt();
            Self::new((m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s)
        };
        q.canonicalize()
    }
}

pub fn quat_canonicalize(q: Quaternion) -> Result<Quaternion, GeometryError> {
    q.canonicalize()
}

/// Angle in degrees of the rotation taking `q1` to `q2`, in `[0, 180]`.
pub fn quat_geodesic_deg(q1: Quaternion, q2: Quaternion) -> f64 {
    let a = q1.to_unit();
    let b = q2.to_unit();
    let d = a.inverse() * b;
    let q = d.quaternion();
    let v = (q.i * q.i + q.j * q.j + q.k * q.k).sqrt();
    (2.0 * v.atan2(q.w.abs())).to_degrees().clamp(0.0, 180.0)
}

/// Angle between two translation directions in degrees, or `None` when either vector is
/// too short for its direction to mean anything.
pub fn translation_angle_deg(t1: &Vec3, t2: &Vec3) -> Option<f64> {
    if t1.norm() <= DEGENERATE_NORM || t2.norm() <= DEGENERATE_NORM {
        return None;
    }
    let cross = t1.cross(t2).norm();
    Some(cross.atan2(t1.dot(t2)).to_degrees().clamp(0.0, 180.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub translation: Vec3,
    pub rotation: Quaternion,
    /// Horizontal field of view in radians.
    pub fov: f64,
}

impl RelativePose {
    pub fn new(translation: Vec3, rotation: Quaternion, fov: f64) -> Result<Self, GeometryError> {
        if !(fov > 0.0 && fov < std::f64::consts::PI) {
            return Err(GeometryError::InvalidInput(format!("fov {fov} outside (0, pi)")));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::InvalidInput("non-finite translation".into()));
        }
        Ok(Self { translation, rotation: rotation.canonicalize()?, fov })
    }

    pub fn identity(fov: f64) -> Self {
        Self { translation: Vec3::zeros(), rotation: Quaternion::IDENTITY, fov }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSequence {
    pub steps: Vec<RelativePose>,
    pub fps: f64,
    pub is_normalized: bool,
}

impl PoseSequence {
    pub fn new(steps: Vec<RelativePose>, fps: f64) -> Result<Self, GeometryError> {
        if !(fps > 0.0) {
            return Err(GeometryError::InvalidInput(format!("fps {fps} must be positive")));
        }
        Ok(Self { steps, fps, is_normalized: false })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Number of frames the sequence spans.
    pub fn frame_count(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn translations(&self) -> Vec<Vec3> {
        self.steps.iter().map(|s| s.translation).collect()
    }

    pub fn mean_fov(&self) -> f64 {
        if self.steps.is_empty() {
            return std::f64::consts::FRAC_PI_2;
        }
        self.steps.iter().map(|s| s.fov).sum::<f64>() / self.steps.len() as f64
    }
}

/// Mean per-step translation norm, in meters for metric sequences.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MetricScale(pub f64);

impl MetricScale {
    pub fn meters(self) -> f64 {
        self.0
    }

    /// The value translations are divided by during normalization.
    pub fn divisor(self, eps: f64) -> f64 {
        self.0.max(eps)
    }
}

pub fn compute_metric_scale(translations: &[Vec3]) -> Result<MetricScale, GeometryError> {
    if translations.is_empty() {
        return Err(GeometryError::InvalidInput("no translations".into()));
    }
    let total: f64 = translations.iter().map(|t| t.norm()).sum();
    Ok(MetricScale(total / translations.len() as f64))
}

/// Divides every translation by `max(s, eps)`. The returned scale is the unclamped `s`.
pub fn normalize_translations(
    seq: &PoseSequence,
    eps: f64,
) -> Result<(PoseSequence, MetricScale), GeometryError> {
    if seq.is_normalized {
        return Err(GeometryError::InvalidInput("sequence is already normalized".into()));
    }
    let scale = compute_metric_scale(&seq.translations())?;
    let divisor = scale.divisor(eps);
    let steps = seq
        .steps
        .iter()
        .map(|s| RelativePose { translation: s.translation / divisor, ..*s })
        .collect();
    Ok((PoseSequence { steps, fps: seq.fps, is_normalized: true }, scale))
}

/// Absolute camera-to-world poses; frame 0 sits at the origin with identity orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub positions: Vec<Vec3>,
    pub orientations: Vec<Quaternion>,
    pub fov: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Pose of frame `j` expressed in the camera coordinates of frame `i`.
    pub fn relative_between(&self, i: usize, j: usize) -> Result<RelativePose, GeometryError> {
        let len = self.len();
        if i >= j || j >= len {
            return Err(GeometryError::IndexOutOfRange { i, j, len });
        }
        let ri = self.orientations[i].to_unit();
        let rj = self.orientations[j].to_unit();
        let translation = ri.inverse() * (self.positions[j] - self.positions[i]);
        Ok(RelativePose {
            translation,
            rotation: Quaternion::from_unit(&(ri.inverse() * rj)),
            fov: self.fov,
        })
    }

    /// Applies a rigid transform `x -> R x + t` to every pose.
    pub fn transformed(&self, rotation: Quaternion, translation: &Vec3) -> Trajectory {
        let r = rotation.to_unit();
        Trajectory {
            positions: self.positions.iter().map(|p| r * p + translation).collect(),
            orientations: self.orientations.iter().map(|q| Quaternion::from_unit(&(r * q.to_unit()))).collect(),
            fov: self.fov,
        }
    }

    /// Back to per-step relative poses.
    pub fn to_sequence(&self, fps: f64) -> PoseSequence {
        let steps = (1..self.len())
            .map(|j| self.relative_between(j - 1, j).expect("consecutive indices are valid"))
            .collect();
        PoseSequence { steps, fps, is_normalized: false }
    }
}

/// Chains relative steps from an identity first frame; translations are multiplied by
/// `scale` when one is given.
pub fn compose_trajectory(seq: &PoseSequence, scale: Option<MetricScale>) -> Trajectory {
    let factor = scale.map_or(1.0, |s| s.0);
    let mut positions = Vec::with_capacity(seq.frame_count());
    let mut orientations = Vec::with_capacity(seq.frame_count());
    let mut p = Vec3::zeros();
    let mut r = UnitQuaternion::identity();
    positions.push(p);
    orientations.push(Quaternion::IDENTITY);
    for step in &seq.steps {
        p += r * (step.translation * factor);
        r *= step.rotation.to_unit();
        positions.push(p);
        orientations.push(Quaternion::from_unit(&r));
    }
    Trajectory { positions, orientations, fov: seq.mean_fov() }
}

/// Rigid transform mapping one point set onto another.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidAlignment {
    pub rotation: Quaternion,
    pub translation: Vec3,
    /// Set when the cross-covariance has rank one (collinear points): the rotation about the
    /// common line is arbitrary, though the residual is still minimal.
    pub rotation_ambiguous: bool,
}

impl RigidAlignment {
    pub fn identity() -> Self {
        Self { rotation: Quaternion::IDENTITY, translation: Vec3::zeros(), rotation_ambiguous: false }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn rmse(&self, p: &[Vec3], q: &[Vec3]) -> f64 {
        let sum: f64 = p.iter().zip(q).map(|(a, b)| (self.apply(a) - b).norm_squared()).sum();
        (sum / p.len().max(1) as f64).sqrt()
    }
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Least-squares rigid alignment (no scale) minimizing `sum |R p_i + t - q_i|^2`, via SVD of
/// the cross-covariance with reflection correction.
pub fn umeyama_se3(p: &[Vec3], q: &[Vec3]) -> Result<RigidAlignment, GeometryError> {
    if p.len() != q.len() {
        return Err(GeometryError::InvalidInput(format!("point counts differ: {} vs {}", p.len(), q.len())));
    }
    if p.len() < 3 {
        return Err(GeometryError::AlignmentFailure(format!("need at least 3 points, got {}", p.len())));
    }
    if p.iter().chain(q).any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(GeometryError::InvalidInput("non-finite point".into()));
    }
    let mp = centroid(p);
    let mq = centroid(q);
    let mut cov = Matrix3::zeros();
    let mut spread = 0.0;
    for (a, b) in p.iter().zip(q) {
        let da = a - mp;
        let db = b - mq;
        cov += da * db.transpose();
        spread += da.norm_squared() + db.norm_squared();
    }
    let svd = cov.svd(true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let sv = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let (s1, s2) = (sv[order[0]], sv[order[1]]);
    if s1 <= 1e-12 * spread.max(f64::MIN_POSITIVE) || s1 == 0.0 {
        return Err(GeometryError::AlignmentFailure("point sets have no spread".into()));
    }
    let rotation_ambiguous = s2 <= 1e-9 * s1;
    let v = v_t.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
    }
    let r = v * d * u.transpose();
    if !r.iter().all(|c| c.is_finite()) {
        return Err(GeometryError::AlignmentFailure("degenerate cross-covariance".into()));
    }
    let rotation = Quaternion::from_matrix(&r)?;
    let translation = mq - rotation.rotate(&mp);
    Ok(RigidAlignment { rotation, translation, rotation_ambiguous })
}
