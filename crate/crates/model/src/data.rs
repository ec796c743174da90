//! Rendering, caching and batching of clips for training and evaluation.
//!
//! Frames are keyed by their exact timestamp, so a clip sampled at 1, 2 and 4 fps renders each
//! shared instant once.

use std::collections::HashMap;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use lapose_core::geometry::{normalize_translations, MetricScale, PoseSequence, SCALE_EPSILON};
use lapose_core::synthworld::{render_frame, ClipSpec, Frame, FRAME_HEIGHT, FRAME_WIDTH};
use rand::Rng;

use crate::codebook::Codebook;
use crate::model::ClipInput;
use crate::ModelError;

pub struct CachedFrame {
    pub frame: Frame,
    /// Codebook indices, present once a codebook is attached.
    pub codes: Option<Vec<u32>>,
}

/// One sampled training example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchItem {
    pub clip: usize,
    pub fps: f64,
}

pub struct Batch {
    pub input: ClipInput,
    /// (B, T, N) u32, present when a codebook is attached.
    pub codes: Option<Tensor>,
    pub items: Vec<BatchItem>,
}

pub fn timestamps(frames: usize, fps: f64) -> Vec<f64> {
    (0..frames).map(|k| k as f64 / fps).collect()
}

pub struct ClipSource {
    specs: Vec<ClipSpec>,
    frames_per_clip: usize,
    patch: usize,
    codebook: Option<Arc<Codebook>>,
    cache: Vec<HashMap<u64, Arc<CachedFrame>>>,
}

impl ClipSource {
    pub fn new(specs: Vec<ClipSpec>, frames_per_clip: usize, patch: usize) -> Self {
        let cache = specs.iter().map(|_| HashMap::new()).collect();
        ClipSource { specs, frames_per_clip, patch, codebook: None, cache }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn specs(&self) -> &[ClipSpec] {
        &self.specs
    }

    pub fn frames_per_clip(&self) -> usize {
        self.frames_per_clip
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_deref()
    }

    /// Attaches a codebook and re-encodes every cached frame.
    pub fn set_codebook(&mut self, codebook: Codebook) -> Result<(), ModelError> {
        let cb = Arc::new(codebook);
        for clip in &mut self.cache {
            for entry in clip.values_mut() {
                let codes = cb.encode_frame(&entry.frame, self.patch)?;
                *entry = Arc::new(CachedFrame { frame: entry.frame.clone(), codes: Some(codes) });
            }
        }
        self.codebook = Some(cb);
        Ok(())
    }

    fn render_one(spec: &ClipSpec, t: f64, patch: usize, cb: Option<&Codebook>) -> Result<CachedFrame, ModelError> {
        let pose = spec.motion.world_pose_at(t);
        let frame = render_frame(&spec.world(), &pose, spec.fov, FRAME_WIDTH, FRAME_HEIGHT);
        let codes = cb.map(|c| c.encode_frame(&frame, patch)).transpose()?;
        Ok(CachedFrame { frame, codes })
    }

    /// Frames of `clip` sampled at `fps`, rendering any not yet cached.
    pub fn frames(&mut self, clip: usize, fps: f64) -> Result<Vec<Arc<CachedFrame>>, ModelError> {
        let spec = &self.specs[clip];
        let mut out = Vec::with_capacity(self.frames_per_clip);
        for t in timestamps(self.frames_per_clip, fps) {
            let entry = match self.cache[clip].get(&t.to_bits()) {
                Some(e) => e.clone(),
                None => {
                    let e = Arc::new(Self::render_one(spec, t, self.patch, self.codebook.as_deref())?);
                    self.cache[clip].insert(t.to_bits(), e.clone());
                    e
                }
            };
            out.push(entry);
        }
        Ok(out)
    }

    /// Renders every (clip, fps) combination up front on `jobs` threads.
    pub fn prefetch(&mut self, fps_list: &[f64], jobs: usize) -> Result<(), ModelError> {
        let mut todo: Vec<(usize, f64)> = Vec::new();
        for clip in 0..self.specs.len() {
            let mut seen = std::collections::HashSet::new();
            for &fps in fps_list {
                for t in timestamps(self.frames_per_clip, fps) {
                    if !self.cache[clip].contains_key(&t.to_bits()) && seen.insert(t.to_bits()) {
                        todo.push((clip, t));
                    }
                }
            }
        }
        let jobs = jobs.max(1);
        let chunk = todo.len().div_ceil(jobs).max(1);
        let (specs, patch, cb) = (&self.specs, self.patch, self.codebook.as_deref());
        let rendered: Vec<Result<Vec<(usize, f64, CachedFrame)>, ModelError>> = std::thread::scope(|s| {
            let handles: Vec<_> = todo
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter().map(|&(c, t)| Ok((c, t, Self::render_one(&specs[c], t, patch, cb)?))).collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("render worker panicked")).collect()
        });
        for part in rendered {
            for (c, t, f) in part? {
                self.cache[c].insert(t.to_bits(), Arc::new(f));
            }
        }
        Ok(())
    }

    /// Patches in [0, 1] from frames at each clip's stored rate, subsampled to at most `max`.
    pub fn sample_patches<R: Rng>(&mut self, max: usize, rng: &mut R) -> Result<Vec<Vec<f32>>, ModelError> {
        let mut all = Vec::new();
        for clip in 0..self.specs.len() {
            let fps = self.specs[clip].motion.fps;
            for f in self.frames(clip, fps)? {
                all.extend(crate::codebook::frame_patches(&f.frame, self.patch));
            }
        }
        if all.len() > max {
            // partial Fisher-Yates
            for i in 0..max {
                let j = rng.random_range(i..all.len());
                all.swap(i, j);
            }
            all.truncate(max);
        }
        Ok(all)
    }

    pub fn assemble(&mut self, items: &[BatchItem], device: &Device) -> Result<Batch, ModelError> {
        let t = self.frames_per_clip;
        let mut pixels = Vec::with_capacity(items.len() * t * FRAME_WIDTH * FRAME_HEIGHT * 3);
        let mut codes = Vec::new();
        let mut stamps = Vec::with_capacity(items.len());
        for it in items {
            for f in self.frames(it.clip, it.fps)? {
                pixels.extend(f.frame.data.iter().map(|&v| v as f32));
                if let Some(c) = &f.codes {
                    codes.extend_from_slice(c);
                }
            }
            stamps.push(timestamps(t, it.fps));
        }
        let frames = Tensor::from_vec(pixels, (items.len(), t, FRAME_HEIGHT, FRAME_WIDTH, 3), device)?;
        let codes = if self.codebook.is_some() {
            let n = codes.len() / (items.len() * t).max(1);
            Some(Tensor::from_vec(codes, (items.len(), t, n), device)?)
        } else {
            None
        };
        Ok(Batch { input: ClipInput { frames, timestamps: stamps }, codes, items: items.to_vec() })
    }

    /// Metric-scale ground truth and its normalized form for a clip sampled at `fps`.
    pub fn ground_truth(&self, clip: usize, fps: f64) -> Result<GroundTruth, ModelError> {
        let metric = self.specs[clip].poses_at(fps);
        let (normalized, scale) = normalize_translations(&metric, SCALE_EPSILON)?;
        Ok(GroundTruth { metric, normalized, scale })
    }
}

pub struct GroundTruth {
    pub metric: PoseSequence,
    pub normalized: PoseSequence,
    pub scale: MetricScale,
}

/// Clips uniformly with replacement, each with a frame rate drawn from `fps_choices`.
pub fn sample_batch<R: Rng>(n_clips: usize, batch: usize, fps_choices: &[f64], rng: &mut R) -> Vec<BatchItem> {
    (0..batch)
        .map(|_| BatchItem { clip: rng.random_range(0..n_clips), fps: fps_choices[rng.random_range(0..fps_choices.len())] })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lapose_core::synthworld::{sample_clip_specs, DatasetConfig, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn source(n: usize) -> ClipSource {
        ClipSource::new(sample_clip_specs(&DatasetConfig::new(n, Split::Train, 5)).unwrap(), 16, 8)
    }

    #[test]
    fn cached_frames_match_direct_rendering() {
        let mut src = source(2);
        let spec = src.specs()[1].clone();
        for fps in [1.0, 3.0, 2.0] {
            let got = src.frames(1, fps).unwrap();
            let want = spec.render_at(fps).frames;
            assert_eq!(got.len(), want.len());
            for (g, w) in got.iter().zip(&want) {
                assert_eq!(&g.frame, w);
            }
        }
        // 16 at 1 fps, 2/3-spaced extras at 3 fps, half-seconds at 2 fps
        let unique: std::collections::HashSet<u64> =
            [1.0, 3.0, 2.0].iter().flat_map(|&f| timestamps(16, f)).map(f64::to_bits).collect();
        assert_eq!(src.cache[1].len(), unique.len());
    }

    #[test]
    fn prefetch_agrees_with_lazy_rendering() {
        let mut a = source(3);
        let mut b = source(3);
        a.prefetch(&[2.0, 4.0], 2).unwrap();
        for c in 0..3 {
            for (x, y) in a.frames(c, 4.0).unwrap().iter().zip(b.frames(c, 4.0).unwrap()) {
                assert_eq!(x.frame, y.frame);
            }
        }
    }

    #[test]
    fn batch_layout_and_codes() {
        let mut src = source(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = src.sample_patches(500, &mut rng).unwrap();
        assert_eq!(patches.len(), 500);
        let cb = crate::codebook::fit_codebook(&patches, 8, 5, 0).unwrap().codebook;
        src.set_codebook(cb.clone()).unwrap();
        let items = [BatchItem { clip: 1, fps: 2.0 }, BatchItem { clip: 0, fps: 4.0 }];
        let batch = src.assemble(&items, &Device::Cpu).unwrap();
        assert_eq!(batch.input.frames.dims(), &[2, 16, 32, 64, 3]);
        assert_eq!(batch.codes.as_ref().unwrap().dims(), &[2, 16, 32]);
        assert_eq!(batch.input.timestamps[1][4], 1.0);
        let frame = src.specs()[0].render_at(4.0).frames[3].clone();
        let codes: Vec<Vec<Vec<u32>>> = batch.codes.unwrap().to_vec3().unwrap();
        assert_eq!(codes[1][3], cb.encode_frame(&frame, 8).unwrap());
        let px: Vec<f32> = batch.input.frames.get(1).unwrap().get(3).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(px.iter().zip(&frame.data).all(|(a, &b)| *a == b as f32));
    }

    #[test]
    fn sampling_covers_choices_and_is_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = sample_batch(10, 400, &[1.0, 2.0, 3.0, 4.0], &mut r1);
        assert_eq!(a, sample_batch(10, 400, &[1.0, 2.0, 3.0, 4.0], &mut r2));
        for f in [1.0, 2.0, 3.0, 4.0] {
            let n = a.iter().filter(|i| i.fps == f).count();
            assert!((60..140).contains(&n), "{f}: {n}");
        }
        assert!(a.iter().all(|i| i.clip < 10));
    }

    #[test]
    fn ground_truth_is_normalized() {
        let src = source(1);
        let gt = src.ground_truth(0, 2.0).unwrap();
        assert!(gt.normalized.is_normalized);
        assert_eq!(gt.normalized.len(), 15);
        let mean: f64 = gt.normalized.translations().iter().map(|t| t.norm()).sum::<f64>() / 15.0;
        if gt.scale.0 >= SCALE_EPSILON {
            assert!((mean - 1.0).abs() < 1e-12);
        }
    }
}
