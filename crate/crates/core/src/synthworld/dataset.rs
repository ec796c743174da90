//! Clip sampling and the on-disk dataset layout.
//!
//! ```text
//! <root>/<split>/<clip_id>/frame_000.png ... frame_015.png
//!                          poses.txt   idx tx ty tz qw qx qy qz (metric, frame-to-frame)
//!                          meta.json
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::motion::{sample_motion, splitmix64, MotionKind, MotionSpec, CLIP_FRAMES};
use super::render::{render_sequence, Frame, WorldSpec, FRAME_HEIGHT, FRAME_WIDTH};
use crate::geometry::{PoseSequence, Quaternion, RelativePose, Vec3};

pub const EVAL_FPS: f64 = 2.0;
pub const TRAIN_FPS_CHOICES: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
pub const DEFAULT_REVERSE_RATE: f64 = 0.02;
pub const HEADING_JITTER_DEG: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("bad dataset file {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid dataset config: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(format!("unknown split `{s}` (expected train|eval)")),
        }
    }
}

/// Relative sampling weights of the non-reverse motion kinds. Reverse clips are drawn at
/// `reverse_rate` and the rest share the remaining probability in these proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionMix {
    pub straight: f64,
    pub left_turn: f64,
    pub right_turn: f64,
    pub s_curve: f64,
    pub stop_and_go: f64,
}

impl Default for MotionMix {
    fn default() -> Self {
        Self { straight: 0.3, left_turn: 0.2, right_turn: 0.2, s_curve: 0.15, stop_and_go: 0.15 }
    }
}

impl MotionMix {
    /// Only straight and turning clips, evenly weighted.
    pub fn probe() -> Self {
        Self { straight: 1.0, left_turn: 1.0, right_turn: 1.0, s_curve: 0.0, stop_and_go: 0.0 }
    }

    fn weights(&self) -> [(MotionKind, f64); 5] {
        [
            (MotionKind::Straight, self.straight),
            (MotionKind::LeftTurn, self.left_turn),
            (MotionKind::RightTurn, self.right_turn),
            (MotionKind::SCurve, self.s_curve),
            (MotionKind::StopAndGo, self.stop_and_go),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_clips: usize,
    pub split: Split,
    pub seed: u64,
    pub reverse_rate: f64,
    pub mix: MotionMix,
}

impl DatasetConfig {
    pub fn new(n_clips: usize, split: Split, seed: u64) -> Self {
        Self { n_clips, split, seed, reverse_rate: DEFAULT_REVERSE_RATE, mix: MotionMix::default() }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.n_clips == 0 {
            return Err(DatasetError::Config("n_clips must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.reverse_rate) {
            return Err(DatasetError::Config(format!("reverse rate {} outside [0, 1]", self.reverse_rate)));
        }
        let total: f64 = self.mix.weights().iter().map(|(_, w)| *w).sum();
        if self.mix.weights().iter().any(|(_, w)| *w < 0.0) || (total <= 0.0 && self.reverse_rate < 1.0) {
            return Err(DatasetError::Config("motion mix weights must be >= 0 with a positive sum".into()));
        }
        Ok(())
    }
}

/// Everything needed to reproduce a clip at any frame rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSpec {
    pub clip_index: usize,
    /// Per-clip seed; derives the world.
    pub seed: u64,
    pub fov: f64,
    pub motion: MotionSpec,
}

#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub gt_poses: PoseSequence,
    pub gt_fov: f64,
    pub motion_label: MotionKind,
}

impl ClipSpec {
    pub fn clip_id(&self) -> String {
        format!("clip_{:05}", self.clip_index)
    }

    pub fn world(&self) -> WorldSpec {
        WorldSpec::for_motion(self.seed, &self.motion)
    }

    /// Renders the clip at its stored frame rate.
    pub fn render(&self) -> Clip {
        self.render_at(self.motion.fps)
    }

    /// Renders the same underlying path sampled at `fps`.
    pub fn render_at(&self, fps: f64) -> Clip {
        let motion = self.motion.with_fps(fps);
        let (gt_poses, world_poses) = sample_motion(&motion, self.fov);
        let frames = render_sequence(&self.world(), &world_poses, self.fov, FRAME_WIDTH, FRAME_HEIGHT);
        Clip { frames, gt_poses, gt_fov: self.fov, motion_label: motion.kind }
    }

    /// Ground-truth poses only, without rendering.
    pub fn poses_at(&self, fps: f64) -> PoseSequence {
        sample_motion(&self.motion.with_fps(fps), self.fov).0
    }
}

pub fn clip_seed(dataset_seed: u64, index: usize) -> u64 {
    splitmix64(dataset_seed ^ splitmix64(index as u64 + 1))
}

fn pick_kind(rng: &mut ChaCha8Rng, cfg: &DatasetConfig) -> MotionKind {
    if rng.random::<f64>() < cfg.reverse_rate {
        return MotionKind::Reverse;
    }
    let weights = cfg.mix.weights();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights {
        if u < w {
            return k;
        }
        u -= w;
    }
    weights.iter().rev().find(|(_, w)| *w > 0.0).map(|(k, _)| *k).unwrap_or(MotionKind::Straight)
}

/// Caps the yaw rate so consecutive frames keep overlapping views at 1 fps.
const MAX_YAW_RATE: f64 = 0.25;

/// Draws the clip description for `index` from its own random stream.
pub fn sample_clip_spec(cfg: &DatasetConfig, index: usize) -> ClipSpec {
    let seed = clip_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = pick_kind(&mut rng, cfg);
    let fps = match cfg.split {
        Split::Eval => EVAL_FPS,
        Split::Train => TRAIN_FPS_CHOICES[rng.random_range(0..TRAIN_FPS_CHOICES.len())],
    };
    let mut speed: f64 = rng.random_range(2.0..14.0);
    let mut accel = 0.0;
    let mut event_time = 0.0;
    let curvature = match kind {
        MotionKind::Straight => 0.0,
        MotionKind::LeftTurn | MotionKind::RightTurn => {
            let mag = (rng.random_range((0.003f64).ln()..(0.25f64).ln())).exp();
            speed = speed.min(MAX_YAW_RATE / mag).max(1.0);
            if kind == MotionKind::LeftTurn {
                -mag
            } else {
                mag
            }
        }
        MotionKind::SCurve => {
            let mag: f64 = rng.random_range(0.01..0.08);
            speed = speed.min(MAX_YAW_RATE / mag).max(1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        }
        MotionKind::Reverse => {
            speed = rng.random_range(1.0..4.0);
            rng.random_range(-0.03..0.03)
        }
        MotionKind::StopAndGo => {
            speed = rng.random_range(4.0..12.0);
            event_time = rng.random_range(0.5..4.0);
            0.0
        }
    };
    if matches!(kind, MotionKind::Straight | MotionKind::LeftTurn | MotionKind::RightTurn) && rng.random_bool(0.4) {
        accel = rng.random_range(-0.5..1.2);
    }
    let fov = rng.random_range(50.0f64..80.0).to_radians();
    let motion = MotionSpec {
        kind,
        speed,
        curvature,
        accel,
        fps,
        frame_count: CLIP_FRAMES,
        event_time,
        heading_jitter_deg: HEADING_JITTER_DEG,
        jitter_seed: splitmix64(seed ^ 0x7177),
    };
    ClipSpec { clip_index: index, seed, fov, motion }
}

pub fn sample_clip_specs(cfg: &DatasetConfig) -> Result<Vec<ClipSpec>, DatasetError> {
    cfg.validate()?;
    Ok((0..cfg.n_clips).map(|i| sample_clip_spec(cfg, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub fps: f64,
    pub fov_rad: f64,
    pub motion_kind: MotionKind,
    pub seed: u64,
    pub clip_index: usize,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    pub motion: MotionSpec,
}

impl ClipMeta {
    pub fn spec(&self) -> ClipSpec {
        ClipSpec { clip_index: self.clip_index, seed: self.seed, fov: self.fov_rad, motion: self.motion }
    }
}

/// Formats with 9 significant digits in scientific notation.
fn sig9(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.8e}")
}

pub fn write_poses(path: &Path, poses: &PoseSequence) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for (i, s) in poses.steps.iter().enumerate() {
        let t = s.translation;
        let q = s.rotation;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            i,
            sig9(t.x),
            sig9(t.y),
            sig9(t.z),
            sig9(q.w),
            sig9(q.x),
            sig9(q.y),
            sig9(q.z)
        )
        .map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_poses(path: &Path, fps: f64, fov: f64) -> Result<PoseSequence, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |msg: String| DatasetError::Format { path: path.to_path_buf(), msg };
    let mut steps = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(bad(format!("line {}: expected 8 fields, got {}", line_no + 1, fields.len())));
        }
        let idx: usize = fields[0].parse().map_err(|e| bad(format!("line {}: {e}", line_no + 1)))?;
        if idx != steps.len() {
            return Err(bad(format!("line {}: step index {idx} out of order", line_no + 1)));
        }
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", line_no + 1)))?;
        let q = Quaternion::new(v[3], v[4], v[5], v[6]);
        let pose = RelativePose::new(Vec3::new(v[0], v[1], v[2]), q, fov).map_err(|e| bad(e.to_string()))?;
        steps.push(pose);
    }
    PoseSequence::new(steps, fps).map_err(|e| bad(e.to_string()))
}

pub fn write_png(path: &Path, frame: &Frame) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), frame.width as u32, frame.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| DatasetError::Format { path: path.to_path_buf(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&frame.data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

pub fn read_png(path: &Path) -> Result<Frame, DatasetError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let fmt = |msg: String| DatasetError::Format { path: path.to_path_buf(), msg };
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| fmt(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| fmt("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(fmt(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Frame { width: info.width as usize, height: info.height as usize, data: buf })
}

/// Writes one clip directory.
pub fn write_clip(dir: &Path, spec: &ClipSpec) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let clip = spec.render();
    for (i, frame) in clip.frames.iter().enumerate() {
        write_png(&dir.join(format!("frame_{i:03}.png")), frame)?;
    }
    write_poses(&dir.join("poses.txt"), &clip.gt_poses)?;
    let meta = ClipMeta {
        fps: spec.motion.fps,
        fov_rad: spec.fov,
        motion_kind: spec.motion.kind,
        seed: spec.seed,
        clip_index: spec.clip_index,
        frame_count: spec.motion.frame_count,
        width: FRAME_WIDTH,
        height: FRAME_HEIGHT,
        motion: spec.motion,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

/// Generates `cfg.n_clips` clips under `<root>/<split>/`, using up to `jobs` threads.
pub fn generate_dataset(cfg: &DatasetConfig, root: &Path, jobs: usize) -> Result<Vec<ClipSpec>, DatasetError> {
    let specs = sample_clip_specs(cfg)?;
    let split_dir = root.join(cfg.split.name());
    fs::create_dir_all(&split_dir).map_err(io_err(&split_dir))?;
    let write = |spec: &ClipSpec| write_clip(&split_dir.join(spec.clip_id()), spec);
    run_jobs(&specs, jobs, write)?;
    Ok(specs)
}

#[cfg(feature = "parallel")]
fn run_jobs<F>(specs: &[ClipSpec], jobs: usize, f: F) -> Result<(), DatasetError>
where
    F: Fn(&ClipSpec) -> Result<(), DatasetError> + Sync + Send,
{
    use rayon::prelude::*;
    if jobs <= 1 {
        return specs.iter().try_for_each(f);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DatasetError::Config(e.to_string()))?;
    pool.install(|| specs.par_iter().try_for_each(f))
}

#[cfg(not(feature = "parallel"))]
fn run_jobs<F>(specs: &[ClipSpec], _jobs: usize, f: F) -> Result<(), DatasetError>
where
    F: Fn(&ClipSpec) -> Result<(), DatasetError>,
{
    specs.iter().try_for_each(f)
}

pub fn read_meta(clip_dir: &Path) -> Result<ClipMeta, DatasetError> {
    let path = clip_dir.join("meta.json");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Format { path, msg: e.to_string() })
}

/// Clip directories of a split, sorted by name.
pub fn clip_dirs(root: &Path, split: Split) -> Result<Vec<PathBuf>, DatasetError> {
    let dir = root.join(split.name());
    let mut dirs: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("meta.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Loads the clip descriptions of a split.
pub fn load_dataset(root: &Path, split: Split) -> Result<Vec<ClipSpec>, DatasetError> {
    let dirs = clip_dirs(root, split)?;
    if dirs.is_empty() {
        return Err(DatasetError::Config(format!("no clips under {}", root.join(split.name()).display())));
    }
    dirs.iter().map(|d| read_meta(d).map(|m| m.spec())).collect()
}

/// Loads a clip's stored frames and poses.
pub fn load_clip(clip_dir: &Path) -> Result<Clip, DatasetError> {
    let meta = read_meta(clip_dir)?;
    let frames = (0..meta.frame_count)
        .map(|i| read_png(&clip_dir.join(format!("frame_{i:03}.png"))))
        .collect::<Result<Vec<_>, _>>()?;
    let gt_poses = read_poses(&clip_dir.join("poses.txt"), meta.fps, meta.fov_rad)?;
    Ok(Clip { frames, gt_poses, gt_fov: meta.fov_rad, motion_label: meta.motion_kind })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn generation_is_byte_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::new(1, Split::Train, 7);
        generate_dataset(&cfg, a.path(), 1).unwrap();
        generate_dataset(&cfg, b.path(), 1).unwrap();
        let ta = tree_bytes(a.path());
        assert_eq!(ta.len(), CLIP_FRAMES + 2);
        assert_eq!(ta, tree_bytes(b.path()));
    }

    #[test]
    fn eval_split_uses_two_fps_and_sixteen_frames() {
        let specs = sample_clip_specs(&DatasetConfig::new(20, Split::Eval, 3)).unwrap();
        assert!(specs.iter().all(|s| s.motion.fps == 2.0 && s.motion.frame_count == 16));
        // eight seconds of driving
        assert_eq!(specs[0].motion.duration(), 7.5);
    }

    #[test]
    fn reverse_rate_zero_has_no_reverse_clips() {
        let mut cfg = DatasetConfig::new(500, Split::Train, 4);
        cfg.reverse_rate = 0.0;
        assert!(sample_clip_specs(&cfg).unwrap().iter().all(|s| s.motion.kind != MotionKind::Reverse));
        cfg.reverse_rate = 0.2;
        let n = sample_clip_specs(&cfg).unwrap().iter().filter(|s| s.motion.kind == MotionKind::Reverse).count();
        assert!(n > 50 && n < 150, "{n}");
    }

    #[test]
    fn sampled_specs_are_valid() {
        let specs = sample_clip_specs(&DatasetConfig::new(300, Split::Train, 9)).unwrap();
        for s in &specs {
            s.motion.validate().unwrap();
            assert!(TRAIN_FPS_CHOICES.contains(&s.motion.fps));
        }
    }

    #[test]
    fn round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig::new(2, Split::Eval, 5);
        let specs = generate_dataset(&cfg, dir.path(), 2).unwrap();
        let loaded = load_dataset(dir.path(), Split::Eval).unwrap();
        assert_eq!(loaded, specs);
        let dirs = clip_dirs(dir.path(), Split::Eval).unwrap();
        let clip = load_clip(&dirs[1]).unwrap();
        let fresh = specs[1].render();
        assert_eq!(clip.frames, fresh.frames);
        for (a, b) in clip.gt_poses.steps.iter().zip(&fresh.gt_poses.steps) {
            assert!((a.translation - b.translation).norm() < 1e-7 * (1.0 + b.translation.norm()));
        }
    }

    #[test]
    fn rejects_bad_config_and_missing_dirs() {
        assert!(sample_clip_specs(&DatasetConfig::new(0, Split::Train, 1)).is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path(), Split::Train).is_err());
        let bad = dir.path().join("poses.txt");
        fs::write(&bad, "0 1 2 3\n").unwrap();
        assert!(matches!(read_poses(&bad, 2.0, 1.0), Err(DatasetError::Format { .. })));
    }

    #[test]
    fn same_path_at_two_rates_shares_frames() {
        let spec = sample_clip_spec(&DatasetConfig::new(1, Split::Train, 12), 0);
        let fast = spec.render_at(4.0);
        let slow = spec.render_at(2.0);
        for k in 0..8 {
            assert_eq!(fast.frames[2 * k], slow.frames[k]);
        }
    }

    #[test]
    fn lower_fps_gives_longer_steps() {
        let mut spec = sample_clip_spec(&DatasetConfig::new(1, Split::Train, 12), 0);
        spec.motion = MotionSpec::new(MotionKind::Straight, 9.0, 0.0, 2.0);
        let mean = |p: PoseSequence| p.steps.iter().map(|s| s.translation.norm()).sum::<f64>() / p.len() as f64;
        let ratio = mean(spec.poses_at(1.0)) / mean(spec.poses_at(4.0));
        assert!((ratio - 4.0).abs() < 1e-9, "{ratio}");
    }
}
