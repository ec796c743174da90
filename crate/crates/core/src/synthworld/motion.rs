//! Continuous-time ego-motion models.
//!
//! A [`MotionSpec`] describes a path as a function of absolute time, so the same path can be
//! sampled at any frame rate: frames at a shared timestamp land on the same pose.

use serde::{Deserialize, Serialize};

use crate::geometry::{PoseSequence, Quaternion, RelativePose, Vec3};

/// Frames per clip.
pub const CLIP_FRAMES: usize = 16;
/// Slowest frame rate a clip may be sampled at; fixes the time horizon a world must cover.
pub const MIN_FPS: f64 = 1.0;
/// Spacing of the knots of the camera-shake noise, in seconds.
const JITTER_KNOT_SECONDS: f64 = 0.25;
/// Wavelength of the s-curve curvature profile, in meters.
const S_CURVE_WAVELENGTH: f64 = 60.0;
const STOP_DECEL: f64 = 2.5;
const STOP_ACCEL: f64 = 1.5;
const STOP_DWELL: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Straight,
    LeftTurn,
    RightTurn,
    SCurve,
    Reverse,
    StopAndGo,
}

impl MotionKind {
    pub const ALL: [MotionKind; 6] = [
        MotionKind::Straight,
        MotionKind::LeftTurn,
        MotionKind::RightTurn,
        MotionKind::SCurve,
        MotionKind::Reverse,
        MotionKind::StopAndGo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionKind::Straight => "straight",
            MotionKind::LeftTurn => "left-turn",
            MotionKind::RightTurn => "right-turn",
            MotionKind::SCurve => "s-curve",
            MotionKind::Reverse => "reverse",
            MotionKind::StopAndGo => "stop-and-go",
        }
    }

    pub fn index(self) -> usize {
        MotionKind::ALL.iter().position(|k| *k == self).expect("listed")
    }
}

impl std::fmt::Display for MotionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MotionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MotionKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown motion kind `{s}`"))
    }
}

/// Path description. Curvature is signed: positive turns right (yaw about the down axis),
/// negative turns left. Heading `psi` follows `d psi / ds = curvature`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub kind: MotionKind,
    /// Initial speed in m/s.
    pub speed: f64,
    /// 1/m; the peak value for s-curves.
    pub curvature: f64,
    /// Longitudinal acceleration in m/s^2 (ignored by stop-and-go). Speed never goes negative.
    #[serde(default)]
    pub accel: f64,
    pub fps: f64,
    pub frame_count: usize,
    /// Time in seconds at which stop-and-go starts braking.
    #[serde(default)]
    pub event_time: f64,
    /// Standard deviation of the camera yaw shake in degrees.
    #[serde(default)]
    pub heading_jitter_deg: f64,
    #[serde(default)]
    pub jitter_seed: u64,
}

/// Camera-to-world pose at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldPose {
    pub position: Vec3,
    pub rotation: Quaternion,
    pub time: f64,
}

impl MotionSpec {
    pub fn new(kind: MotionKind, speed: f64, curvature: f64, fps: f64) -> Self {
        Self {
            kind,
            speed,
            curvature,
            accel: 0.0,
            fps,
            frame_count: CLIP_FRAMES,
            event_time: 0.0,
            heading_jitter_deg: 0.0,
            jitter_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.speed >= 0.0) || !self.speed.is_finite() {
            return Err(format!("speed {} must be >= 0", self.speed));
        }
        if !(self.fps > 0.0) {
            return Err(format!("fps {} must be > 0", self.fps));
        }
        if self.frame_count < 2 {
            return Err("need at least 2 frames".into());
        }
        let k = self.curvature;
        let sign_ok = match self.kind {
            MotionKind::Straight | MotionKind::StopAndGo => k == 0.0,
            MotionKind::LeftTurn => k < 0.0,
            MotionKind::RightTurn => k > 0.0,
            MotionKind::SCurve => k != 0.0,
            MotionKind::Reverse => true,
        };
        if !sign_ok {
            return Err(format!("curvature {k} does not match {}", self.kind));
        }
        Ok(())
    }

    pub fn with_fps(mut self, fps: f64) -> Self {
        self.fps = fps;
        self
    }

    /// Duration covered by the clip at its own frame rate.
    pub fn duration(&self) -> f64 {
        (self.frame_count - 1) as f64 / self.fps
    }

    /// Longest duration the clip can span at any supported frame rate.
    pub fn horizon(&self) -> f64 {
        (self.frame_count - 1) as f64 / MIN_FPS.min(self.fps)
    }

    /// Speed magnitude at time `t`.
    pub fn speed_at(&self, t: f64) -> f64 {
        match self.kind {
            MotionKind::StopAndGo => stop_and_go(self.speed, self.event_time, t).1,
            _ => {
                if self.accel >= 0.0 {
                    self.speed + self.accel * t
                } else {
                    (self.speed + self.accel * t).max(0.0)
                }
            }
        }
    }

    /// Unsigned distance travelled by time `t`.
    pub fn distance_at(&self, t: f64) -> f64 {
        match self.kind {
            MotionKind::StopAndGo => stop_and_go(self.speed, self.event_time, t).0,
            _ => {
                let a = self.accel;
                if a >= 0.0 {
                    self.speed * t + 0.5 * a * t * t
                } else {
                    let t_stop = self.speed / -a;
                    let tt = t.min(t_stop);
                    self.speed * tt + 0.5 * a * tt * tt
                }
            }
        }
    }

    /// Signed arc length: negative when reversing.
    pub fn arc_length_at(&self, t: f64) -> f64 {
        let d = self.distance_at(t);
        if self.kind == MotionKind::Reverse {
            -d
        } else {
            d
        }
    }

    pub fn curvature_at_arc(&self, s: f64) -> f64 {
        match self.kind {
            MotionKind::SCurve => self.curvature * (std::f64::consts::TAU * s / S_CURVE_WAVELENGTH).sin(),
            _ => self.curvature,
        }
    }

    /// Path heading at arc length `s`.
    pub fn heading_at_arc(&self, s: f64) -> f64 {
        match self.kind {
            MotionKind::SCurve => {
                let w = std::f64::consts::TAU / S_CURVE_WAVELENGTH;
                self.curvature * (1.0 - (w * s).cos()) / w
            }
            _ => self.curvature * s,
        }
    }

    /// Ground-plane position (x, z) at arc length `s`.
    pub fn position_at_arc(&self, s: f64) -> (f64, f64) {
        match self.kind {
            MotionKind::SCurve => integrate_heading(|u| self.heading_at_arc(u), s),
            _ => {
                let k = self.curvature;
                if k.abs() < 1e-12 {
                    (0.0, s)
                } else {
                    let a = k * s;
                    // (1 - cos a) / k and sin a / k, written to stay accurate for small a.
                    let half = 0.5 * a;
                    (2.0 * half.sin().powi(2) / k, a.sin() / k)
                }
            }
        }
    }

    /// Camera yaw shake at time `t`, radians.
    pub fn jitter_at(&self, t: f64) -> f64 {
        if self.heading_jitter_deg == 0.0 {
            return 0.0;
        }
        let sigma = self.heading_jitter_deg.to_radians();
        let u = (t / JITTER_KNOT_SECONDS).max(0.0);
        let i = u.floor();
        let f = u - i;
        let a = knot_noise(self.jitter_seed, i as u64);
        let b = knot_noise(self.jitter_seed, i as u64 + 1);
        sigma * (a * (1.0 - f) + b * f)
    }

    pub fn world_pose_at(&self, t: f64) -> WorldPose {
        let s = self.arc_length_at(t);
        let (x, z) = self.position_at_arc(s);
        let yaw = self.heading_at_arc(s) + self.jitter_at(t);
        WorldPose { position: Vec3::new(x, 0.0, z), rotation: Quaternion::from_yaw(yaw), time: t }
    }

    /// World poses at the clip's frame timestamps `k / fps`.
    pub fn world_poses(&self) -> Vec<WorldPose> {
        (0..self.frame_count).map(|k| self.world_pose_at(k as f64 / self.fps)).collect()
    }
}

/// Distance and speed for a cruise / brake / dwell / accelerate profile.
fn stop_and_go(v0: f64, t_brake: f64, t: f64) -> (f64, f64) {
    let t_b = t_brake.max(0.0);
    if t <= t_b {
        return (v0 * t, v0);
    }
    let d_cruise = v0 * t_b;
    let brake = v0 / STOP_DECEL;
    let dt = t - t_b;
    if dt <= brake {
        return (d_cruise + v0 * dt - 0.5 * STOP_DECEL * dt * dt, v0 - STOP_DECEL * dt);
    }
    let d_brake = d_cruise + 0.5 * v0 * brake;
    let dt = dt - brake;
    if dt <= STOP_DWELL {
        return (d_brake, 0.0);
    }
    let dt = dt - STOP_DWELL;
    let ramp = v0 / STOP_ACCEL;
    if dt <= ramp {
        return (d_brake + 0.5 * STOP_ACCEL * dt * dt, STOP_ACCEL * dt);
    }
    (d_brake + 0.5 * v0 * ramp + v0 * (dt - ramp), v0)
}

/// Composite Simpson integration of (sin psi, cos psi) from 0 to `s`.
fn integrate_heading(psi: impl Fn(f64) -> f64, s: f64) -> (f64, f64) {
    if s == 0.0 {
        return (0.0, 0.0);
    }
    let n = ((s.abs() / 0.05).ceil() as usize).max(2) * 2;
    let h = s / n as f64;
    let (mut x, mut z) = (0.0, 0.0);
    for i in 0..=n {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let a = psi(i as f64 * h);
        x += w * a.sin();
        z += w * a.cos();
    }
    (x * h / 3.0, z * h / 3.0)
}

/// Standard-normal value attached to knot `i` of a jitter stream.
fn knot_noise(seed: u64, i: u64) -> f64 {
    let a = splitmix64(seed ^ splitmix64(i.wrapping_mul(2).wrapping_add(1)));
    let b = splitmix64(a);
    let u1 = ((a >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = (b >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Relative steps between consecutive world poses.
pub fn relative_steps(poses: &[WorldPose], fov: f64, fps: f64) -> PoseSequence {
    let steps = poses
        .windows(2)
        .map(|w| {
            let ri = w[0].rotation.to_unit();
            let rj = w[1].rotation.to_unit();
            RelativePose {
                translation: ri.inverse() * (w[1].position - w[0].position),
                rotation: Quaternion::from_unit(&(ri.inverse() * rj)),
                fov,
            }
        })
        .collect();
    PoseSequence { steps, fps, is_normalized: false }
}

/// Ground-truth relative poses and world poses for a clip at `spec.fps`.
pub fn sample_motion(spec: &MotionSpec, fov: f64) -> (PoseSequence, Vec<WorldPose>) {
    let poses = spec.world_poses();
    (relative_steps(&poses, fov, spec.fps), poses)
}
