//! Software pinhole ray caster for the synthetic driving world.
//!
//! The world is an infinite tiled ground plane, a band of distant hills on the horizon and a
//! set of axis-aligned boxes and poles scattered along the path. Rendering is a pure function
//! of (world, pose, fov, resolution).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::motion::{splitmix64, MotionSpec, WorldPose};
use crate::geometry::Vec3;

pub const FRAME_WIDTH: usize = 64;
pub const FRAME_HEIGHT: usize = 32;
/// Camera height above the ground plane (ground is at +y, the down axis).
pub const CAMERA_HEIGHT: f64 = 1.5;
const SUPERSAMPLE: usize = 2;
const FOG_DISTANCE: f64 = 45.0;
const HILL_TERMS: usize = 4;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    /// Edge length of the ground tiles in meters.
    pub tile_size: f64,
    pub obstacles: Vec<Obstacle>,
    /// Global brightness multiplier.
    pub ambient: f64,
    /// (amplitude, frequency, phase) terms of the horizon profile.
    pub hills: Vec<[f64; 3]>,
}

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.65, 0.25],
    [0.20, 0.35, 0.85],
    [0.90, 0.80, 0.15],
    [0.75, 0.25, 0.80],
    [0.15, 0.75, 0.80],
    [0.95, 0.55, 0.15],
    [0.95, 0.95, 0.95],
];

impl WorldSpec {
    /// Builds a world whose obstacles line the path `motion` traces over its longest horizon,
    /// so the same world serves every frame rate.
    pub fn for_motion(seed: u64, motion: &MotionSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x5EED_0B57));
        let count = rng.random_range(20..=60);
        let horizon = motion.horizon();
        let s_end = motion.arc_length_at(horizon);
        // Cover the travelled arc plus what is visible ahead of the last frame.
        let (lo, hi) = if s_end >= 0.0 { (-5.0, s_end + 40.0) } else { (s_end - 5.0, 40.0) };
        let mut obstacles = Vec::with_capacity(count);
        for _ in 0..count {
            let s = rng.random_range(lo..hi);
            let (x, z) = motion.position_at_arc(s);
            let psi = motion.heading_at_arc(s);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let offset = side * rng.random_range(2.5..12.0);
            // perpendicular to the heading, in the ground plane
            let cx = x + offset * psi.cos();
            let cz = z - offset * psi.sin();
            let pole = rng.random_bool(0.35);
            let (hw, hd, h) = if pole {
                (rng.random_range(0.1..0.25), rng.random_range(0.1..0.25), rng.random_range(3.0..6.0))
            } else {
                (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.8..3.5))
            };
            let base = PALETTE[rng.random_range(0..PALETTE.len())];
            let tint: f64 = rng.random_range(0.7..1.0);
            obstacles.push(Obstacle {
                min: [cx - hw, CAMERA_HEIGHT - h, cz - hd],
                max: [cx + hw, CAMERA_HEIGHT, cz + hd],
                color: [base[0] * tint, base[1] * tint, base[2] * tint],
            });
        }
        let hills = (0..HILL_TERMS)
            .map(|i| {
                let freq = (i + 1) as f64 + rng.random_range(0.0..1.0);
                [rng.random_range(0.02..0.06) / (i + 1) as f64, freq.round(), rng.random_range(0.0..std::f64::consts::TAU)]
            })
            .collect();
        Self {
            seed,
            tile_size: rng.random_range(1.5..3.0),
            obstacles,
            ambient: rng.random_range(0.8..1.0),
            hills,
        }
    }

    fn ground_color(&self, x: f64, z: f64) -> [f64; 3] {
        let ix = (x / self.tile_size).floor() as i64;
        let iz = (z / self.tile_size).floor() as i64;
        let h = splitmix64(self.seed ^ splitmix64((ix as u64).wrapping_mul(0x1F1F) ^ (iz as u64).rotate_left(32)));
        let v = 0.25 + 0.5 * ((h >> 40) as f64 / (1u64 << 24) as f64);
        let hue = (h & 3) as usize;
        let tints = [[1.0, 0.95, 0.85], [0.85, 1.0, 0.85], [0.9, 0.9, 1.0], [1.0, 1.0, 1.0]];
        let checker = if (ix + iz).rem_euclid(2) == 0 { 1.0 } else { 0.7 };
        let t = tints[hue];
        [v * t[0] * checker, v * t[1] * checker, v * t[2] * checker]
    }

    fn horizon_height(&self, azimuth: f64) -> f64 {
        self.hills.iter().map(|[a, f, p]| a * (f * azimuth + p).sin()).sum::<f64>() + 0.06
    }

    /// Color seen along a world-space ray, testing only `obstacles`.
    fn shade(&self, origin: &Vec3, dir: &Vec3, obstacles: &[&Obstacle]) -> [f64; 3] {
        let mut best_t = f64::INFINITY;
        let mut color = [0.0; 3];
        if dir.y > 1e-9 {
            let t = (CAMERA_HEIGHT - origin.y) / dir.y;
            if t > 0.0 {
                best_t = t;
                let hit = origin + dir * t;
                color = self.ground_color(hit.x, hit.z);
            }
        }
        for ob in obstacles {
            if let Some((t, axis)) = ray_box(origin, dir, &ob.min, &ob.max) {
                if t < best_t {
                    best_t = t;
                    let shade = [0.75, 1.05, 0.9][axis];
                    color = [ob.color[0] * shade, ob.color[1] * shade, ob.color[2] * shade];
                }
            }
        }
        if best_t.is_infinite() {
            let horiz = (dir.x * dir.x + dir.z * dir.z).sqrt();
            let elevation = (-dir.y).atan2(horiz);
            let azimuth = dir.x.atan2(dir.z);
            let sky = if elevation < self.horizon_height(azimuth) {
                [0.35, 0.42, 0.50]
            } else {
                let g = elevation.clamp(0.0, 1.0);
                [0.55 + 0.2 * g, 0.70 + 0.15 * g, 0.95]
            };
            return sky.map(|c| c * self.ambient);
        }
        let fog = 1.0 - (-best_t / FOG_DISTANCE).exp();
        let haze = [0.62, 0.70, 0.80];
        [0, 1, 2].map(|i| (color[i] * (1.0 - fog) + haze[i] * fog) * self.ambient)
    }
}

/// Slab test; returns the entry distance and the axis of the entered face.
fn ray_box(o: &Vec3, d: &Vec3, min: &[f64; 3], max: &[f64; 3]) -> Option<(f64, usize)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if o[a] < min[a] || o[a] > max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut near = (min[a] - o[a]) * inv;
        let mut far = (max[a] - o[a]) * inv;
        if near > far {
            std::mem::swap(&mut near, &mut far);
        }
        if near > t0 {
            t0 = near;
            axis = a;
        }
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    if t0 <= 0.0 {
        return None;
    }
    Some((t0, axis))
}

/// Focal length in pixels for a horizontal field of view.
pub fn focal_length(width: usize, fov: f64) -> f64 {
    0.5 * width as f64 / (0.5 * fov).tan()
}

/// Projects a world point into pixel coordinates for a camera pose, or `None` behind it.
pub fn project(pose: &WorldPose, fov: f64, width: usize, height: usize, point: &Vec3) -> Option<(f64, f64)> {
    let local = pose.rotation.to_unit().inverse() * (point - pose.position);
    if local.z <= 1e-9 {
        return None;
    }
    let f = focal_length(width, fov);
    Some((0.5 * width as f64 + f * local.x / local.z, 0.5 * height as f64 + f * local.y / local.z))
}

/// Obstacles with at least one corner inside every half-space bounding the view frustum.
/// A box wholly outside one of them cannot be hit by any camera ray.
fn visible_obstacles<'a>(world: &'a WorldSpec, pose: &WorldPose, tx: f64, ty: f64) -> Vec<&'a Obstacle> {
    let inv = pose.rotation.to_unit().inverse();
    world
        .obstacles
        .iter()
        .filter(|ob| {
            let corners: Vec<Vec3> = (0..8)
                .map(|i| {
                    let w = Vec3::new(
                        if i & 1 == 0 { ob.min[0] } else { ob.max[0] },
                        if i & 2 == 0 { ob.min[1] } else { ob.max[1] },
                        if i & 4 == 0 { ob.min[2] } else { ob.max[2] },
                    );
                    inv * (w - pose.position)
                })
                .collect();
            let slack = 1e-6;
            let outside = |f: &dyn Fn(&Vec3) -> f64| corners.iter().all(|c| f(c) < -slack);
            !(outside(&|c| c.z) || outside(&|c| c.x + tx * c.z) || outside(&|c| tx * c.z - c.x) || outside(&|c| c.y + ty * c.z) || outside(&|c| ty * c.z - c.y))
        })
        .collect()
}

pub fn render_frame(world: &WorldSpec, pose: &WorldPose, fov: f64, width: usize, height: usize) -> Frame {
    let f = focal_length(width, fov);
    let rot = pose.rotation.to_unit();
    let (cx, cy) = (0.5 * width as f64, 0.5 * height as f64);
    let visible = visible_obstacles(world, pose, cx / f, cy / f);
    let mut frame = Frame::new(width, height);
    let n = SUPERSAMPLE as f64;
    for py in 0..height {
        for px in 0..width {
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = px as f64 + (sx as f64 + 0.5) / n;
                    let v = py as f64 + (sy as f64 + 0.5) / n;
                    let dir = rot * Vec3::new((u - cx) / f, (v - cy) / f, 1.0);
                    let c = world.shade(&pose.position, &dir, &visible);
                    for i in 0..3 {
                        acc[i] += c[i];
                    }
                }
            }
            let s = 1.0 / (n * n);
            let rgb = acc.map(|c| (c * s * 255.0).round().clamp(0.0, 255.0) as u8);
            frame.set_pixel(px, py, rgb);
        }
    }
    frame
}

pub fn render_sequence(world: &WorldSpec, poses: &[WorldPose], fov: f64, width: usize, height: usize) -> Vec<Frame> {
    assert!(fov > 0.0 && fov < std::f64::consts::PI, "fov must lie in (0, pi)");
    poses.iter().map(|p| render_frame(world, p, fov, width, height)).collect()
}
