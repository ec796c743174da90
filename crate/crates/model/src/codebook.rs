//! Frozen k-means patch codebook supplying the discrete prediction targets.

use std::collections::HashSet;
use std::path::Path;

use lapose_core::synthworld::Frame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::ModelError;

const MAGIC: &[u8; 4] = b"LACB";
const VERSION: u32 = 1;
pub const LLOYD_ITERATIONS: usize = 50;

/// Flattened `patch x patch` RGB patches of a frame in row-major grid order, each laid out
/// (row, column, channel) with values in [0, 1].
pub fn frame_patches(frame: &Frame, patch: usize) -> Vec<Vec<f32>> {
    let (hp, wp) = (frame.height / patch, frame.width / patch);
    let mut out = Vec::with_capacity(hp * wp);
    for gy in 0..hp {
        for gx in 0..wp {
            let mut v = Vec::with_capacity(patch * patch * 3);
            for py in 0..patch {
                let row = ((gy * patch + py) * frame.width + gx * patch) * 3;
                v.extend(frame.data[row..row + patch * 3].iter().map(|b| *b as f32 / 255.0));
            }
            out.push(v);
        }
    }
    out
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub codes: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub codebook: Codebook,
    /// Mean squared quantization error after each Lloyd iteration.
    pub distortion: Vec<f64>,
}

impl Codebook {
    pub fn code(&self, j: usize) -> &[f32] {
        &self.codes[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest code by squared L2; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> (usize, f32) {
        let mut best = (0, f32::INFINITY);
        for j in 0..self.k {
            let d = sq_dist(v, self.code(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    pub fn encode_frame(&self, frame: &Frame, patch: usize) -> Result<Vec<u32>, ModelError> {
        if frame.width % patch != 0 || frame.height % patch != 0 || 3 * patch * patch != self.dim {
            return Err(ModelError::Shape(format!(
                "frame {}x{} with patch {patch} does not match codebook dim {}",
                frame.width, frame.height, self.dim
            )));
        }
        Ok(frame_patches(frame, patch).iter().map(|p| self.nearest(p).0 as u32).collect())
    }

    pub fn min_code_distance(&self) -> f32 {
        let mut best = f32::INFINITY;
        for a in 0..self.k {
            for b in a + 1..self.k {
                best = best.min(sq_dist(self.code(a), self.code(b)).sqrt());
            }
        }
        best
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.codes.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.codes {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// SHA-256 of the serialized header and code vectors, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.body_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body_bytes();
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Format(format!("codebook: {m}"));
        if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
            return Err(bad("missing LACB header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
        if word(4) != VERSION as usize {
            return Err(bad(&format!("unsupported version {}", word(4))));
        }
        let (k, dim) = (word(8), word(12));
        let body_len = 16 + k * dim * 4;
        if bytes.len() != body_len + 32 {
            return Err(bad(&format!("expected {} bytes, found {}", body_len + 32, bytes.len())));
        }
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            return Err(bad("content hash mismatch"));
        }
        let codes = bytes[16..body_len].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Codebook { k, dim, codes })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ModelError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn assign(points: &[Vec<f32>], centers: &[Vec<f32>]) -> (Vec<usize>, Vec<f32>) {
    points
        .iter()
        .map(|p| {
            let mut best = (0, f32::INFINITY);
            for (j, c) in centers.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            best
        })
        .unzip()
}

/// k-means++ seeding followed by a fixed number of Lloyd iterations. Empty clusters are
/// re-seeded from the points farthest from their current centers.
pub fn fit_codebook(patches: &[Vec<f32>], k: usize, iterations: usize, seed: u64) -> Result<FitReport, ModelError> {
    let dim = patches.first().map_or(0, Vec::len);
    if dim == 0 || patches.iter().any(|p| p.len() != dim) {
        return Err(ModelError::Shape("patches must be non-empty vectors of equal length".into()));
    }
    let distinct: HashSet<Vec<u32>> = patches.iter().map(|p| p.iter().map(|v| v.to_bits()).collect()).collect();
    if distinct.len() < k {
        return Err(ModelError::Codebook(format!("only {} distinct patches for {k} codes", distinct.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f32>> = vec![patches[rng.random_range(0..patches.len())].clone()];
    let mut d2: Vec<f32> = patches.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().map(|v| *v as f64).sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.len() - 1;
            for (i, v) in d2.iter().enumerate() {
                r -= *v as f64;
                if r <= 0.0 && *v > 0.0 {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            rng.random_range(0..patches.len())
        };
        centers.push(patches[pick].clone());
        for (i, p) in patches.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centers[centers.len() - 1]));
        }
    }
    let mut distortion = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (labels, dists) = assign(patches, &centers);
        let mut sums = vec![vec![0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in patches.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += *v as f64;
            }
        }
        let mut order: Vec<usize> = (0..patches.len()).collect();
        order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
        let mut far = order.into_iter();
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| (*s / counts[j] as f64) as f32).collect();
            } else if let Some(i) = far.next() {
                centers[j] = patches[i].clone();
            }
        }
        let (_, after) = assign(patches, &centers);
        distortion.push(after.iter().map(|v| *v as f64).sum::<f64>() / patches.len() as f64);
    }
    Ok(FitReport { codebook: Codebook { k, dim, codes: centers.concat() }, distortion })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(rgb: [u8; 3]) -> Frame {
        Frame::filled(64, 32, rgb)
    }

    #[test]
    fn two_constant_frames_give_their_colors() {
        let mut patches = frame_patches(&solid([255, 0, 0]), 8);
        patches.extend(frame_patches(&solid([0, 0, 255]), 8));
        let cb = fit_codebook(&patches, 2, 10, 0).unwrap().codebook;
        let mut codes: Vec<Vec<f32>> = (0..2).map(|j| cb.code(j).to_vec()).collect();
        codes.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert!(codes[0].chunks(3).all(|c| c == [0.0, 0.0, 1.0]));
        assert!(codes[1].chunks(3).all(|c| c == [1.0, 0.0, 0.0]));
    }

    fn noisy_patches(n: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| (0..12).map(|d| ((i % 5) as f32 * 0.2 + if d % 2 == 0 { 0.0 } else { 0.1 }) + rng.random::<f32>() * 0.05).collect()).collect()
    }

    #[test]
    fn fitting_is_deterministic_and_monotone() {
        let pts = noisy_patches(400, 1);
        let a = fit_codebook(&pts, 8, 20, 7).unwrap();
        let b = fit_codebook(&pts, 8, 20, 7).unwrap();
        assert_eq!(a.codebook.hash(), b.codebook.hash());
        for w in a.distortion.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", a.distortion);
        }
        let c = fit_codebook(&pts, 8, 20, 8).unwrap();
        assert_ne!(a.codebook.hash(), c.codebook.hash());
    }

    #[test]
    fn insufficient_distinct_patches() {
        let patches = frame_patches(&solid([10, 20, 30]), 8);
        assert!(matches!(fit_codebook(&patches, 2, 5, 0), Err(ModelError::Codebook(_))));
    }

    #[test]
    fn tiled_code_encodes_to_its_index() {
        let pts = noisy_patches(200, 2);
        let cb = fit_codebook(&pts, 4, 10, 0).unwrap().codebook;
        let small = &cb;
        let cb = Codebook { dim: 192, codes: (0..4).flat_map(|j| (0..192).map(move |i| small.code(j)[i % 12])).collect(), k: 4 };
        for j in 0..4 {
            let mut f = Frame::new(64, 32);
            let code = cb.code(j);
            for gy in 0..4 {
                for gx in 0..8 {
                    for py in 0..8 {
                        for px in 0..8 {
                            let o = (py * 8 + px) * 3;
                            let rgb = [0, 1, 2].map(|c| (code[o + c] * 255.0).round() as u8);
                            f.set_pixel(gx * 8 + px, gy * 8 + py, rgb);
                        }
                    }
                }
            }
            assert!(cb.encode_frame(&f, 8).unwrap().iter().all(|c| *c == j as u32));
        }
    }

    #[test]
    fn small_perturbations_keep_indices() {
        let pts = noisy_patches(300, 3);
        let cb = fit_codebook(&pts, 5, 15, 1).unwrap().codebook;
        let margin = cb.min_code_distance() / 2.0;
        for j in 0..cb.k {
            let mut v = cb.code(j).to_vec();
            let step = 0.99 * margin / (v.len() as f32).sqrt();
            for x in v.iter_mut() {
                *x += step;
            }
            assert_eq!(cb.nearest(&v).0, j);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let cb = fit_codebook(&noisy_patches(100, 4), 3, 5, 0).unwrap().codebook;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codebook.lacb");
        cb.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"LACB");
        assert_eq!(bytes.len(), 16 + 3 * 12 * 4 + 32);
        assert_eq!(Codebook::load(&path).unwrap(), cb);
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        assert!(Codebook::from_bytes(&bad).is_err());
        assert!(Codebook::from_bytes(&bytes[..10]).is_err());
    }
}
