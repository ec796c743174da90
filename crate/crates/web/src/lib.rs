//! WebAssembly bindings for the browser demo: render a synthetic driving frame, trace the ego
//! path, and score a noise-perturbed copy of the ground-truth motion.

use lapose_core::geometry::{compose_trajectory, PoseSequence, Quaternion, RelativePose, Vec3};
use lapose_core::metrics::pose::{ate_s, auc5};
use lapose_core::synthworld::motion::{sample_motion, MotionKind, MotionSpec};
use lapose_core::synthworld::{render_frame, WorldSpec, FRAME_HEIGHT, FRAME_WIDTH};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const FOV: f64 = 1.2;

/// `curvature` is a magnitude; the sign follows from the motion kind.
fn motion(kind: &str, speed: f64, curvature: f64, fps: f64) -> Result<MotionSpec, String> {
    let kind = MotionKind::ALL.into_iter().find(|k| k.name() == kind).ok_or_else(|| format!("unknown motion kind `{kind}`"))?;
    let k = curvature.abs();
    let signed = match kind {
        MotionKind::Straight | MotionKind::StopAndGo => 0.0,
        MotionKind::LeftTurn => -k,
        MotionKind::RightTurn | MotionKind::SCurve | MotionKind::Reverse => k,
    };
    let m = MotionSpec::new(kind, speed, signed, fps);
    m.validate()?;
    Ok(m)
}

#[wasm_bindgen]
pub fn frame_width() -> usize {
    FRAME_WIDTH
}

#[wasm_bindgen]
pub fn frame_height() -> usize {
    FRAME_HEIGHT
}

/// RGBA pixels of frame `index` (row-major, ready for `ImageData`).
pub fn render_rgba(kind: &str, speed: f64, curvature: f64, fps: f64, seed: u64, index: usize) -> Result<Vec<u8>, String> {
    let m = motion(kind, speed, curvature, fps)?;
    let poses = m.world_poses();
    let pose = poses.get(index).ok_or_else(|| format!("frame {index} outside 0..{}", poses.len()))?;
    let frame = render_frame(&WorldSpec::for_motion(seed, &m), pose, FOV, FRAME_WIDTH, FRAME_HEIGHT);
    let mut out = Vec::with_capacity(FRAME_WIDTH * FRAME_HEIGHT * 4);
    for y in 0..FRAME_HEIGHT {
        for x in 0..FRAME_WIDTH {
            out.extend_from_slice(&frame.pixel(x, y));
            out.push(255);
        }
    }
    Ok(out)
}

/// Camera centres projected on the ground plane as `[x0, z0, x1, z1, ...]` in meters.
pub fn path_xz(kind: &str, speed: f64, curvature: f64, fps: f64) -> Result<Vec<f64>, String> {
    Ok(motion(kind, speed, curvature, fps)?.world_poses().iter().flat_map(|p| [p.position.x, p.position.z]).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct NoisyScore {
    pub auc5: f64,
    /// `None` when the ground truth is near-stationary.
    pub ate_s: Option<f64>,
    /// Ground truth and prediction composed into trajectories, `[x, z]` per frame.
    pub gt_xz: Vec<[f64; 2]>,
    pub pred_xz: Vec<[f64; 2]>,
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Perturbs every ground-truth step by a rotation of `rot_noise_deg` about a random axis and
/// tilts its translation by `dir_noise_deg`, then scores the result.
pub fn score_noisy(kind: &str, speed: f64, curvature: f64, fps: f64, rot_noise_deg: f64, dir_noise_deg: f64, seed: u64) -> Result<NoisyScore, String> {
    let m = motion(kind, speed, curvature, fps)?;
    let (gt, _) = sample_motion(&m, FOV);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = gt
        .steps
        .iter()
        .map(|s| {
            let dq = Quaternion::from_axis_angle(random_unit(&mut rng), rot_noise_deg.to_radians());
            let axis = random_unit(&mut rng);
            let tilt = Quaternion::from_axis_angle(axis, dir_noise_deg.to_radians());
            RelativePose::new(tilt.rotate(&s.translation), s.rotation.compose(dq), s.fov)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let pred = PoseSequence::new(steps, gt.fps).map_err(|e| e.to_string())?;
    let auc = auc5(&pred, &gt).map_err(|e| e.to_string())?.auc;
    let gt_traj = compose_trajectory(&gt, None);
    let pred_traj = compose_trajectory(&pred, None);
    let ate = ate_s(&pred_traj, &gt_traj).map_err(|e| e.to_string())?.value();
    let xz = |t: &lapose_core::geometry::Trajectory| t.positions.iter().map(|p| [p.x, p.z]).collect();
    Ok(NoisyScore { auc5: auc, ate_s: ate, gt_xz: xz(&gt_traj), pred_xz: xz(&pred_traj) })
}

#[wasm_bindgen(js_name = renderFrame)]
pub fn render_frame_js(kind: &str, speed: f64, curvature: f64, fps: f64, seed: u32, index: usize) -> Result<Vec<u8>, JsError> {
    render_rgba(kind, speed, curvature, fps, seed as u64, index).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = pathXz)]
pub fn path_xz_js(kind: &str, speed: f64, curvature: f64, fps: f64) -> Result<Vec<f64>, JsError> {
    path_xz(kind, speed, curvature, fps).map_err(|e| JsError::new(&e))
}

/// JSON-encoded [`NoisyScore`].
#[wasm_bindgen(js_name = scoreNoisy)]
pub fn score_noisy_js(kind: &str, speed: f64, curvature: f64, fps: f64, rot_noise_deg: f64, dir_noise_deg: f64, seed: u32) -> Result<String, JsError> {
    let s = score_noisy(kind, speed, curvature, fps, rot_noise_deg, dir_noise_deg, seed as u64).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&s).map_err(|e| JsError::new(&e.to_string()))
}
