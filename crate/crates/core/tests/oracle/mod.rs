//! Brute-force reference implementations of the pose metrics. Everything here is written
//! against plain arrays and shares no code with the library beyond the input types.

#![allow(dead_code)]

use lapose_core::geometry::{PoseSequence, Vec3};
use nalgebra::{Matrix4, SymmetricEigen};

pub type Q = [f64; 4];
pub type P = [f64; 3];

pub fn qmul(a: Q, b: Q) -> Q {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn qconj(a: Q) -> Q {
    [a[0], -a[1], -a[2], -a[3]]
}

pub fn qrot(q: Q, v: P) -> P {
    let r = qmul(qmul(q, [0.0, v[0], v[1], v[2]]), qconj(q));
    [r[1], r[2], r[3]]
}

pub fn sub(a: P, b: P) -> P {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: P, b: P) -> P {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: P, s: f64) -> P {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: P, b: P) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: P, b: P) -> P {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: P) -> f64 {
    dot(a, a).sqrt()
}

pub fn steps_of(seq: &PoseSequence) -> Vec<(P, Q)> {
    seq.steps
        .iter()
        .map(|s| ([s.translation.x, s.translation.y, s.translation.z], s.rotation.to_array()))
        .collect()
}

pub fn points(v: &[Vec3]) -> Vec<P> {
    v.iter().map(|p| [p.x, p.y, p.z]).collect()
}

/// Camera positions and orientations, frame 0 at the origin.
pub fn compose(steps: &[(P, Q)], factor: f64) -> (Vec<P>, Vec<Q>) {
    let mut pos = vec![[0.0; 3]];
    let mut ori = vec![[1.0, 0.0, 0.0, 0.0]];
    for (t, q) in steps {
        let (p, r) = (*pos.last().unwrap(), *ori.last().unwrap());
        pos.push(add(p, qrot(r, scale(*t, factor))));
        ori.push(qmul(r, *q));
    }
    (pos, ori)
}

fn rotation_angle_deg(q: Q) -> f64 {
    let v = (q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    2.0 * v.atan2(q[0].abs()).to_degrees()
}

fn direction_angle_deg(a: P, b: P) -> f64 {
    norm(cross(a, b)).atan2(dot(a, b)).to_degrees()
}

/// Combined error of every non-degenerate pair i < j, enumerated directly.
pub fn pair_errors(pred: &[(P, Q)], gt: &[(P, Q)], degenerate: f64) -> Vec<f64> {
    let s = gt.iter().map(|(t, _)| norm(*t)).sum::<f64>() / gt.len() as f64;
    let gt_unit: Vec<(P, Q)> = gt.iter().map(|(t, q)| (scale(*t, 1.0 / s.max(1.0)), *q)).collect();
    let (pp, po) = compose(pred, 1.0);
    let (gp, go) = compose(&gt_unit, 1.0);
    let mut out = Vec::new();
    for i in 0..gp.len() {
        for j in i + 1..gp.len() {
            let tg = qrot(qconj(go[i]), sub(gp[j], gp[i]));
            if norm(tg) <= degenerate {
                continue;
            }
            let tp = qrot(qconj(po[i]), sub(pp[j], pp[i]));
            let rot = rotation_angle_deg(qmul(qconj(qmul(qconj(po[i]), po[j])), qmul(qconj(go[i]), go[j])));
            let dir = if norm(tp) <= degenerate { 180.0 } else { direction_angle_deg(tp, tg) };
            out.push(rot.max(dir));
        }
    }
    out
}

/// Integral of the empirical accuracy curve `a(x) = #{e < x} / n` over `[0, limit]`, divided
/// by `limit`, in percent. The curve is a step function so the integral is a finite sum.
pub fn accuracy_curve_area(errors: &[f64], limit: f64) -> f64 {
    let mut e: Vec<f64> = errors.iter().map(|&x| x.min(limit)).collect();
    e.sort_by(f64::total_cmp);
    let n = e.len() as f64;
    let mut area = 0.0;
    for (k, w) in e.windows(2).enumerate() {
        area += (w[1] - w[0]) * (k + 1) as f64 / n;
    }
    area += (limit - e[e.len() - 1]) * 1.0;
    100.0 * area / limit
}

pub fn mean_step(p: &[P]) -> f64 {
    p.windows(2).map(|w| norm(sub(w[1], w[0]))).sum::<f64>() / (p.len() - 1) as f64
}

fn centroid(p: &[P]) -> P {
    scale(p.iter().fold([0.0; 3], |a, b| add(a, *b)), 1.0 / p.len() as f64)
}

/// Horn's closed form: the optimal rotation taking `a` onto `b` is the top eigenvector of a
/// symmetric 4x4 matrix built from the centred cross-covariance. Returns the rotation, the
/// translation and the gap between the two largest eigenvalues.
pub fn horn(a: &[P], b: &[P]) -> (Q, P, f64) {
    let (ca, cb) = (centroid(a), centroid(b));
    let mut s = [[0.0; 3]; 3];
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (sub(*x, ca), sub(*y, cb));
        for r in 0..3 {
            for c in 0..3 {
                s[r][c] += x[r] * y[c];
            }
        }
    }
    let [[sxx, sxy, sxz], [syx, syy, syz], [szx, szy, szz]] = s;
    #[rustfmt::skip]
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let mut idx: Vec<usize> = (0..4).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let v = eig.eigenvectors.column(idx[0]);
    let q = [v[0], v[1], v[2], v[3]];
    let t = sub(cb, qrot(q, ca));
    (q, t, eig.eigenvalues[idx[0]] - eig.eigenvalues[idx[1]])
}

pub fn rmse_after(q: Q, t: P, a: &[P], b: &[P]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| dot(sub(add(qrot(q, *x), t), *y), sub(add(qrot(q, *x), t), *y))).sum();
    (sq / a.len() as f64).sqrt()
}

pub fn horn_rmse(a: &[P], b: &[P]) -> f64 {
    let (q, t, _) = horn(a, b);
    rmse_after(q, t, a, b)
}

fn rotvec_quat(w: P) -> Q {
    let th = norm(w);
    if th < 1e-15 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let s = (th / 2.0).sin() / th;
    [(th / 2.0).cos(), w[0] * s, w[1] * s, w[2] * s]
}

/// Minimal aligned RMSE by exhaustive search over rotation vectors: a coarse grid over the
/// ball of radius pi, then repeated finer grids around the incumbent down to `resolution`.
/// The translation for a fixed rotation is the centroid difference.
pub fn grid_search_rmse(a: &[P], b: &[P], resolution: f64) -> f64 {
    let (ca, cb) = (centroid(a), centroid(b));
    let cost = |w: P| {
        let q = rotvec_quat(w);
        rmse_after(q, sub(cb, qrot(q, ca)), a, b)
    };
    let pi = std::f64::consts::PI;
    let n = 16;
    let mut best = ([0.0; 3], cost([0.0; 3]));
    for i in 0..=n {
        for j in 0..=n {
            for k in 0..=n {
                let w = [-pi + 2.0 * pi * i as f64 / n as f64, -pi + 2.0 * pi * j as f64 / n as f64, -pi + 2.0 * pi * k as f64 / n as f64];
                if norm(w) <= pi {
                    let c = cost(w);
                    if c < best.1 {
                        best = (w, c);
                    }
                }
            }
        }
    }
    let mut step = 2.0 * pi / n as f64;
    while step > resolution {
        let centre = best.0;
        for i in -2..=2 {
            for j in -2..=2 {
                for k in -2..=2 {
                    let w = add(centre, [i as f64 * step / 2.0, j as f64 * step / 2.0, k as f64 * step / 2.0]);
                    let c = cost(w);
                    if c < best.1 {
                        best = (w, c);
                    }
                }
            }
        }
        if best.0 == centre {
            step /= 2.0;
        }
    }
    best.1
}

/// Scale-free trajectory error, or `None` for a near-stationary ground truth.
pub fn ate_s(pred: &[P], gt: &[P], stationary: f64) -> Option<f64> {
    let g = mean_step(gt);
    if g < stationary {
        return None;
    }
    let p = mean_step(pred);
    let pu: Vec<P> = pred.iter().map(|x| scale(*x, 1.0 / p)).collect();
    let gu: Vec<P> = gt.iter().map(|x| scale(*x, 1.0 / g)).collect();
    Some(horn_rmse(&pu, &gu))
}

pub fn ate_m(pred_unit_steps: &[(P, Q)], pred_scale: f64, gt: &[P]) -> f64 {
    let (p, _) = compose(pred_unit_steps, pred_scale);
    horn_rmse(&p, gt)
}

/// A random ground truth of `frames` frames with metric steps, plus a prediction that is the
/// ground truth with small rotation and direction noise and an arbitrary overall scale.
pub struct Case {
    pub gt: PoseSequence,
    pub pred: PoseSequence,
    pub pred_scale: f64,
}

fn random_quat<R: rand::Rng>(rng: &mut R, max_angle: f64) -> Q {
    let axis = loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n = norm(v);
        if n > 0.1 && n <= 1.0 {
            break scale(v, 1.0 / n);
        }
    };
    rotvec_quat(scale(axis, rng.random_range(0.0..max_angle)))
}

fn pose(t: P, q: Q) -> lapose_core::geometry::RelativePose {
    use lapose_core::geometry::{Quaternion, RelativePose};
    RelativePose::new(Vec3::new(t[0], t[1], t[2]), Quaternion::from_array(q), 1.1).unwrap()
}

pub fn random_case<R: rand::Rng>(rng: &mut R, frames: usize) -> Case {
    let noise_deg: f64 = rng.random_range(0.0..8.0);
    let step_len: f64 = rng.random_range(0.3..4.0);
    let pred_scale: f64 = rng.random_range(0.5..2.0);
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for _ in 1..frames {
        let t = scale([rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2), rng.random_range(0.3..1.0)], step_len);
        let q = random_quat(rng, 0.4);
        let dq = random_quat(rng, noise_deg.to_radians());
        let tilt = random_quat(rng, noise_deg.to_radians());
        gt.push(pose(t, q));
        pred.push(pose(scale(qrot(tilt, t), 1.0 / (step_len * pred_scale)), qmul(q, dq)));
    }
    Case { gt: PoseSequence::new(gt, 2.0).unwrap(), pred: PoseSequence::new(pred, 2.0).unwrap(), pred_scale }
}
