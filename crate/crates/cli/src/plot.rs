//! Minimal SVG charts: xz trajectories with camera frustums, histograms and 2-D scatters.

use std::fmt::Write;

use lapose_core::geometry::{Trajectory, Vec3};
use lapose_core::metrics::report::HistogramBin;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Canvas {
    body: String,
}

impl Canvas {
    fn new(title: &str) -> Self {
        let mut body = String::new();
        let _ = write!(
            body,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = write!(body, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = write!(body, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, escape(title));
        Canvas { body }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str, width: f64) {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = write!(self.body, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="{width}"/>"#, coords.join(" "));
    }

    fn polygon(&mut self, pts: &[(f64, f64)], color: &str, opacity: f64) {
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = write!(
            self.body,
            r#"<polygon points="{}" fill="{color}" fill-opacity="{opacity}" stroke="{color}" stroke-width="1"/>"#,
            coords.join(" ")
        );
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, color: &str) {
        let _ = write!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{color}"/>"#);
    }

    fn circle(&mut self, x: f64, y: f64, r: f64, color: &str) {
        let _ = write!(self.body, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r}" fill="{color}" fill-opacity="0.8"/>"#);
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, s: &str) {
        let _ = write!(self.body, r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}">{}</text>"#, escape(s));
    }

    fn finish(mut self) -> String {
        self.body.push_str("</svg>\n");
        self.body
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps data coordinates into the plot area with equal or independent axis scales.
struct Axes {
    x0: f64,
    y0: f64,
    sx: f64,
    sy: f64,
}

impl Axes {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, equal: bool) -> Self {
        let (xmin, xmax) = bounds(xs);
        let (ymin, ymax) = bounds(ys);
        let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
        let mut sx = w / (xmax - xmin);
        let mut sy = h / (ymax - ymin);
        if equal {
            sx = sx.min(sy);
            sy = sx;
        }
        let x0 = MARGIN + (w - sx * (xmax - xmin)) / 2.0 - sx * xmin;
        let y0 = HEIGHT - MARGIN - (h - sy * (ymax - ymin)) / 2.0 + sy * ymin;
        Axes { x0, y0, sx, sy }
    }

    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        (self.x0 + self.sx * x, self.y0 - self.sy * y)
    }
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(0.5);
    (lo - pad, hi + pad)
}

/// Ground truth and prediction projected onto the xz plane, with frustums at `frustum_at`.
pub fn trajectory_svg(title: &str, gt: &Trajectory, pred: &Trajectory, frustum_at: &[usize]) -> String {
    let all: Vec<&Vec3> = gt.positions.iter().chain(&pred.positions).collect();
    let axes = Axes::fit(all.iter().map(|p| p.x), all.iter().map(|p| p.z), true);
    let mut c = Canvas::new(title);
    let extent = (WIDTH - 2.0 * MARGIN) / axes.sx;
    for (traj, color) in [(gt, "#222222"), (pred, PALETTE[1])] {
        let pts: Vec<(f64, f64)> = traj.positions.iter().map(|p| axes.map(p.x, p.z)).collect();
        c.polyline(&pts, color, 1.8);
        for &i in frustum_at.iter().filter(|&&i| i < traj.len()) {
            let p = traj.positions[i];
            let q = traj.orientations[i];
            let size = 0.04 * extent;
            let half = 0.5 * traj.fov.clamp(0.1, 3.0);
            let corner = |side: f64| {
                let local = Vec3::new(side * half.tan(), 0.0, 1.0) * size;
                let w = p + q.rotate(&local);
                axes.map(w.x, w.z)
            };
            c.polygon(&[axes.map(p.x, p.z), corner(-1.0), corner(1.0)], color, 0.25);
        }
    }
    c.text(MARGIN, HEIGHT - 10.0, "start", "x (m)  vs  z (m); black: ground truth, red: prediction");
    c.finish()
}

pub fn histogram_svg(title: &str, bins: &[HistogramBin]) -> String {
    let mut c = Canvas::new(title);
    let max = bins.iter().map(|b| b.count).max().unwrap_or(0).max(1) as f64;
    let (lo, hi) = (bins.first().map_or(0.0, |b| b.lo), bins.last().map_or(100.0, |b| b.hi));
    let (w, h) = (WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN);
    for b in bins {
        let x = MARGIN + w * (b.lo - lo) / (hi - lo);
        let bw = w * (b.hi - b.lo) / (hi - lo);
        let bh = h * b.count as f64 / max;
        c.rect(x + 1.0, HEIGHT - MARGIN - bh, bw - 2.0, bh, PALETTE[0]);
        c.text(x + bw / 2.0, HEIGHT - MARGIN - bh - 3.0, "middle", &b.count.to_string());
        c.text(x, HEIGHT - MARGIN + 14.0, "middle", &format!("{:.0}", b.lo));
    }
    c.text(MARGIN + w, HEIGHT - MARGIN + 14.0, "middle", &format!("{hi:.0}"));
    c.text(WIDTH / 2.0, HEIGHT - 8.0, "middle", "AUC@5 (%)");
    c.finish()
}

pub fn scatter_svg(title: &str, points: &[[f64; 2]], labels: &[usize], names: &[&str]) -> String {
    let axes = Axes::fit(points.iter().map(|p| p[0]), points.iter().map(|p| p[1]), false);
    let mut c = Canvas::new(title);
    for (p, &l) in points.iter().zip(labels) {
        let (x, y) = axes.map(p[0], p[1]);
        c.circle(x, y, 3.0, PALETTE[l % PALETTE.len()]);
    }
    for (i, name) in names.iter().enumerate() {
        let y = 34.0 + 14.0 * i as f64;
        c.circle(WIDTH - 110.0, y - 4.0, 4.0, PALETTE[i % PALETTE.len()]);
        c.text(WIDTH - 100.0, y, "start", name);
    }
    c.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lapose_core::geometry::Quaternion;

    fn line(n: usize) -> Trajectory {
        Trajectory {
            positions: (0..n).map(|i| Vec3::new(0.0, 0.0, i as f64)).collect(),
            orientations: vec![Quaternion::IDENTITY; n],
            fov: 1.2,
        }
    }

    #[test]
    fn trajectory_plot_has_both_paths_and_frustums() {
        let svg = trajectory_svg("clip <1>", &line(16), &line(16), &[0, 5, 10, 15]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<polygon").count(), 8);
        assert!(svg.contains("clip &lt;1&gt;"));
    }

    #[test]
    fn degenerate_inputs_still_render() {
        let svg = trajectory_svg("", &line(1), &line(1), &[0, 5]);
        assert!(!svg.contains("NaN"));
        let svg = scatter_svg("", &[[0.0, 0.0], [0.0, 0.0]], &[0, 1], &["a", "b"]);
        assert!(!svg.contains("NaN") && svg.matches("<circle").count() == 4);
        let svg = histogram_svg("", &[HistogramBin { lo: 0.0, hi: 50.0, count: 0 }, HistogramBin { lo: 50.0, hi: 100.0, count: 3 }]);
        assert_eq!(svg.matches("<rect").count(), 3);
    }
}
