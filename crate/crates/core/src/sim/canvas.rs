use serde::{Deserialize, Serialize};

use super::SimConfig;
use crate::geometry::PoseState;
use crate::tensor::Tensor;

/// Intensities are stored on the 16-bit grid `k / 65535` so images survive a
/// PNG round trip bit-exactly.
pub const LEVELS: f64 = 65535.0;

pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * LEVELS).round() / LEVELS
}

/// Grayscale paper, 1 = white, 0 = full ink.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

const SUPERSAMPLE: usize = 4;

impl Canvas {
    pub fn blank(height: usize, width: usize) -> Self {
        Canvas {
            height,
            width,
            data: vec![1.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Ink amount `1 − intensity` per pixel.
    pub fn ink(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|v| 1.0 - v)
    }

    /// Deposits ink for a pen at `pose` (no-op when the pen is up): subtracts
    /// the per-pixel coverage of a disc of `footprint_radius` pixels centred
    /// on the pen tip, estimated on a 4×4 subpixel grid.
    pub fn stamp(&mut self, pose: &PoseState, cfg: &SimConfig) {
        if !pose.pen_down {
            return;
        }
        self.stamp_at(pose.translation[0], pose.translation[1], cfg.footprint_radius);
    }

    fn stamp_at(&mut self, x: f64, y: f64, radius: f64) {
        let (cx, cy) = (x * self.width as f64, y * self.height as f64);
        let r2 = radius * radius;
        let row_lo = (cy - radius).floor().max(0.0) as usize;
        let col_lo = (cx - radius).floor().max(0.0) as usize;
        let row_hi = ((cy + radius).ceil() as isize).min(self.height as isize - 1);
        let col_hi = ((cx + radius).ceil() as isize).min(self.width as isize - 1);
        if row_hi < 0 || col_hi < 0 {
            return;
        }
        let step = 1.0 / SUPERSAMPLE as f64;
        for row in row_lo..=row_hi as usize {
            for col in col_lo..=col_hi as usize {
                let mut inside = 0usize;
                for si in 0..SUPERSAMPLE {
                    let py = row as f64 + (si as f64 + 0.5) * step - cy;
                    for sj in 0..SUPERSAMPLE {
                        let px = col as f64 + (sj as f64 + 0.5) * step - cx;
                        if px * px + py * py <= r2 {
                            inside += 1;
                        }
                    }
                }
                if inside > 0 {
                    let coverage = inside as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64;
                    let v = &mut self.data[row * self.width + col];
                    *v = quantize(*v - coverage);
                }
            }
        }
    }

    /// Ink deposited while the pen moves from `from` to `to`: a continuous
    /// line of stamps (spaced half a pixel) when both ends touch the paper, a
    /// single stamp at `to` when only the destination does.
    pub fn advance(&mut self, from: &PoseState, to: &PoseState, cfg: &SimConfig) {
        if !to.pen_down {
            return;
        }
        if !from.pen_down {
            self.stamp(to, cfg);
            return;
        }
        let (x0, y0) = (from.translation[0], from.translation[1]);
        let (x1, y1) = (to.translation[0], to.translation[1]);
        let dist_px = ((x1 - x0) * self.width as f64).hypot((y1 - y0) * self.height as f64);
        let n = ((dist_px / 0.5).ceil() as usize).clamp(1, 4096);
        for k in 1..=n {
            let t = k as f64 / n as f64;
            self.stamp_at(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, cfg.footprint_radius);
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("canvas shape")
    }
}

/// Anti-aliased coverage of a line segment of half-width `hw` pixels.
fn segment_coverage(px: f64, py: f64, a: (f64, f64), b: (f64, f64), hw: f64) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = (px - a.0 - t * dx).hypot(py - a.1 - t * dy);
    (hw + 0.5 - d).clamp(0.0, 1.0)
}

/// Three-channel camera frame: channel 0 is the canvas, channel 1 the pen
/// marker (a short segment from the tip along the projected pen axis),
/// channel 2 a disc at the tip whose brightness encodes pen height.
pub fn render_image(canvas: &Canvas, pose: &PoseState, cfg: &SimConfig) -> Tensor {
    let (h, w) = (canvas.height, canvas.width);
    let mut data = vec![0.0; 3 * h * w];
    data[..h * w].copy_from_slice(&canvas.data);

    let tip = (pose.translation[0] * w as f64, pose.translation[1] * h as f64);
    let axis = pose.pen_axis();
    let tail = (tip.0 + cfg.marker_gain * axis[0], tip.1 + cfg.marker_gain * axis[1]);
    let height = (pose.translation[2] / cfg.travel_height).clamp(0.0, 1.0);
    let cue = 0.2 + 0.8 * height;
    let reach = cfg.marker_gain + cfg.cue_radius + 2.0;
    let row_lo = (tip.1 - reach).floor().max(0.0) as usize;
    let row_hi = ((tip.1 + reach).ceil().max(-1.0) as usize).min(h.saturating_sub(1));
    let col_lo = (tip.0 - reach).floor().max(0.0) as usize;
    let col_hi = ((tip.0 + reach).ceil().max(-1.0) as usize).min(w.saturating_sub(1));
    if tip.0.is_finite() && tip.1.is_finite() && tip.0 + reach >= 0.0 && tip.1 + reach >= 0.0 {
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let (px, py) = (col as f64 + 0.5, row as f64 + 0.5);
                data[h * w + row * w + col] = quantize(segment_coverage(px, py, tip, tail, 0.8));
                let d = (px - tip.0).hypot(py - tip.1);
                let disc = (cfg.cue_radius + 0.5 - d).clamp(0.0, 1.0);
                data[2 * h * w + row * w + col] = quantize(cue * disc);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Quat;
    use std::collections::VecDeque;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    fn down(x: f64, y: f64) -> PoseState {
        PoseState::new([x, y, 0.0], Quat::IDENTITY)
    }

    #[test]
    fn pen_up_leaves_canvas_unchanged() {
        let mut c = Canvas::blank(32, 32);
        c.stamp(&PoseState::new([0.5, 0.5, 0.1], Quat::IDENTITY), &cfg());
        assert_eq!(c, Canvas::blank(32, 32));
    }

    #[test]
    fn single_stamp_is_darkest_at_center() {
        let mut c = Canvas::blank(33, 33);
        c.stamp(&down(16.5 / 33.0, 16.5 / 33.0), &cfg());
        let min = c.data.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(c.get(16, 16), min);
        assert!(min < 1.0);
        assert!(c.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stamping_saturates_at_zero() {
        let mut c = Canvas::blank(16, 16);
        for _ in 0..5 {
            c.stamp(&down(0.5, 0.5), &cfg());
        }
        assert!(c.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(c.get(8, 8), 0.0);
    }

    /// Flood fill over pixels with at least half ink (4-connectivity).
    fn components(c: &Canvas) -> usize {
        let inked: Vec<bool> = c.ink().map(|v| v >= 0.5).collect();
        let mut seen = vec![false; inked.len()];
        let mut count = 0;
        for start in 0..inked.len() {
            if !inked[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                let (r, col) = (i / c.width, i % c.width);
                let mut nb = Vec::new();
                if r > 0 {
                    nb.push(i - c.width);
                }
                if r + 1 < c.height {
                    nb.push(i + c.width);
                }
                if col > 0 {
                    nb.push(i - 1);
                }
                if col + 1 < c.width {
                    nb.push(i + 1);
                }
                for j in nb {
                    if inked[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn straight_stroke_is_connected() {
        let mut c = Canvas::blank(64, 64);
        let mut prev = down(0.2, 0.3);
        c.stamp(&prev, &cfg());
        // Coarse steps: continuity comes from the segment stamping.
        for k in 1..=10 {
            let next = down(0.2 + 0.06 * k as f64, 0.3 + 0.04 * k as f64);
            c.advance(&prev, &next, &cfg());
            prev = next;
        }
        assert_eq!(components(&c), 1);
    }

    #[test]
    fn render_marks_tip_and_height() {
        let c = Canvas::blank(32, 32);
        let low = render_image(&c, &PoseState::new([0.5, 0.5, 0.0], Quat::IDENTITY), &cfg());
        let high = render_image(&c, &PoseState::new([0.5, 0.5, 0.1], Quat::IDENTITY), &cfg());
        let idx = |ch: usize| ch * 32 * 32 + 16 * 32 + 16;
        assert_eq!(low.data()[idx(0)], 1.0);
        assert!(low.data()[idx(1)] > 0.5);
        assert!(high.data()[idx(2)] > low.data()[idx(2)]);
        assert!(low.data().iter().all(|v| (0.0..=1.0).contains(v)));
        // A vertical pen shows only a dot; tilting it draws the marker out.
        let tilted = PoseState::new([0.5, 0.5, 0.0], Quat::from_axis_angle([0.0, 1.0, 0.0], 0.5));
        let t = render_image(&c, &tilted, &cfg());
        let marker = |img: &Tensor| img.data()[32 * 32..2 * 32 * 32].iter().sum::<f64>();
        assert!(marker(&t) > marker(&low) + 2.0);
    }
}
