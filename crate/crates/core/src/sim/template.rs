use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Quat;

/// One stroke: a chain of cubic Bézier segments sharing endpoints, stored as
/// `3n + 1` control points `[p0, c1, c2, p1, c3, c4, p2, …]` in the paper
/// plane (x right, y down, both in `[0, 1]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub points: Vec<[f64; 2]>,
    /// Pen tilt as rotation vectors (axis × angle from vertical) at the start
    /// and end of the stroke; interpolated linearly along arc length.
    pub tilt_start: [f64; 3],
    pub tilt_end: [f64; 3],
    pub samples: usize,
}

impl Stroke {
    pub fn segments(&self) -> usize {
        self.points.len().saturating_sub(1) / 3
    }

    pub fn start(&self) -> [f64; 2] {
        self.points[0]
    }

    pub fn end(&self) -> [f64; 2] {
        *self.points.last().expect("validated stroke")
    }

    /// Straight stroke from `a` to `b` as a single degenerate cubic.
    pub fn line(a: [f64; 2], b: [f64; 2], tilt_start: [f64; 3], tilt_end: [f64; 3], samples: usize) -> Self {
        let lerp = |t: f64| [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
        Stroke {
            points: vec![a, lerp(1.0 / 3.0), lerp(2.0 / 3.0), b],
            tilt_start,
            tilt_end,
            samples,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.points.len() < 4 || (self.points.len() - 1) % 3 != 0 {
            return Err(Error::config(format!(
                "stroke needs 3n+1 control points, got {}",
                self.points.len()
            )));
        }
        if self
            .points
            .iter()
            .flatten()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::config("stroke control point outside the unit square"));
        }
        if self.samples < 2 {
            return Err(Error::config("stroke needs at least 2 samples"));
        }
        Ok(())
    }

    /// Point at parameter `u ∈ [0, segments]` by de Casteljau evaluation.
    /// Collinear (and coincident) control points give points exactly on the
    /// line they span along any axis where they agree.
    pub fn eval(&self, u: f64) -> [f64; 2] {
        let n = self.segments();
        let seg = (u.floor() as usize).min(n - 1);
        let t = u - seg as f64;
        let p = &self.points[3 * seg..3 * seg + 4];
        let lerp = |a: [f64; 2], b: [f64; 2]| [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
        let (a, b, c) = (lerp(p[0], p[1]), lerp(p[1], p[2]), lerp(p[2], p[3]));
        let (d, e) = (lerp(a, b), lerp(b, c));
        lerp(d, e)
    }

    /// `samples` points spaced uniformly in arc length, including both ends.
    /// Also returns each point's arc-length fraction.
    pub fn sample_uniform(&self) -> Vec<([f64; 2], f64)> {
        const DENSE: usize = 64;
        let n = self.segments();
        let total_steps = DENSE * n;
        let params: Vec<f64> = (0..=total_steps).map(|k| k as f64 / DENSE as f64).collect();
        let pts: Vec<[f64; 2]> = params.iter().map(|&u| self.eval(u)).collect();
        let mut cum = vec![0.0; pts.len()];
        for k in 1..pts.len() {
            let (dx, dy) = (pts[k][0] - pts[k - 1][0], pts[k][1] - pts[k - 1][1]);
            cum[k] = cum[k - 1] + (dx * dx + dy * dy).sqrt();
        }
        let length = cum[cum.len() - 1];
        (0..self.samples)
            .map(|i| {
                let frac = i as f64 / (self.samples - 1) as f64;
                if length == 0.0 {
                    return (self.eval(frac * n as f64), frac);
                }
                let target = frac * length;
                let k = cum.partition_point(|&c| c < target).clamp(1, cum.len() - 1);
                let span = cum[k] - cum[k - 1];
                let w = if span > 0.0 { (target - cum[k - 1]) / span } else { 0.0 };
                let u = params[k - 1] + w * (params[k] - params[k - 1]);
                (self.eval(u), frac)
            })
            .collect()
    }

    pub fn tilt_at(&self, frac: f64) -> Quat {
        let v = [0, 1, 2].map(|i| self.tilt_start[i] + (self.tilt_end[i] - self.tilt_start[i]) * frac);
        Quat::from_rotation_vector(v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterTemplate {
    pub id: String,
    pub strokes: Vec<Stroke>,
    /// Where the pen parks (at travel height) once the character is done.
    pub rest: [f64; 2],
}

impl CharacterTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.strokes.is_empty() {
            return Err(Error::config(format!("template {} has no strokes", self.id)));
        }
        for s in &self.strokes {
            s.validate()?;
        }
        if !self.rest.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::config("rest position outside the unit square"));
        }
        Ok(())
    }

    /// Copy with every control point displaced by at most `jitter` per axis:
    /// a shared offset (70 %) plus per-point noise (30 %), clamped to the unit
    /// square. Tilt vectors get independent noise of at most `tilt_jitter`.
    pub fn jittered<R: Rng>(&self, jitter: f64, tilt_jitter: f64, rng: &mut R) -> CharacterTemplate {
        let mut out = self.clone();
        if jitter > 0.0 {
            let shared = [
                rng.random_range(-0.7..=0.7) * jitter,
                rng.random_range(-0.7..=0.7) * jitter,
            ];
            for stroke in &mut out.strokes {
                for p in &mut stroke.points {
                    for (axis, v) in p.iter_mut().enumerate() {
                        let own = rng.random_range(-0.3..=0.3) * jitter;
                        *v = (*v + shared[axis] + own).clamp(0.0, 1.0);
                    }
                }
            }
        }
        if tilt_jitter > 0.0 {
            for stroke in &mut out.strokes {
                for v in stroke.tilt_start.iter_mut().chain(stroke.tilt_end.iter_mut()) {
                    *v += rng.random_range(-1.0..=1.0) * tilt_jitter;
                }
            }
        }
        out
    }
}

fn tilt(angle: f64, azimuth_deg: f64) -> [f64; 3] {
    let a = azimuth_deg.to_radians();
    [angle * a.cos(), angle * a.sin(), 0.0]
}

fn curve(points: &[[f64; 2]], t0: [f64; 3], t1: [f64; 3], samples: usize) -> Stroke {
    Stroke {
        points: points.to_vec(),
        tilt_start: t0,
        tilt_end: t1,
        samples,
    }
}

/// Identifiers of the built-in templates, in increasing stroke count.
pub const BUILTIN_TEMPLATES: [&str; 5] = ["line1", "cross2", "river3", "tree4", "eternal5"];

/// Five characters of increasing difficulty: 一, 十, 川, 木 and a
/// five-stroke 永-like figure.
pub fn builtin(id: &str) -> Result<CharacterTemplate> {
    let t = match id {
        "line1" => CharacterTemplate {
            id: id.into(),
            strokes: vec![Stroke::line([0.2, 0.5], [0.8, 0.5], tilt(0.2, 90.0), tilt(0.3, 60.0), 40)],
            rest: [0.8, 0.8],
        },
        "cross2" => CharacterTemplate {
            id: id.into(),
            strokes: vec![
                Stroke::line([0.2, 0.4], [0.8, 0.4], tilt(0.2, 90.0), tilt(0.25, 70.0), 32),
                Stroke::line([0.5, 0.15], [0.5, 0.85], tilt(0.2, 0.0), tilt(0.3, 20.0), 34),
            ],
            rest: [0.8, 0.8],
        },
        "river3" => CharacterTemplate {
            id: id.into(),
            strokes: vec![
                curve(
                    &[[0.3, 0.2], [0.31, 0.4], [0.29, 0.6], [0.18, 0.8]],
                    tilt(0.2, 10.0),
                    tilt(0.35, 40.0),
                    30,
                ),
                Stroke::line([0.5, 0.28], [0.5, 0.66], tilt(0.2, 0.0), tilt(0.25, 10.0), 20),
                Stroke::line([0.72, 0.15], [0.72, 0.86], tilt(0.2, 0.0), tilt(0.3, 0.0), 34),
            ],
            rest: [0.85, 0.9],
        },
        "tree4" => CharacterTemplate {
            id: id.into(),
            strokes: vec![
                Stroke::line([0.15, 0.35], [0.85, 0.35], tilt(0.2, 90.0), tilt(0.25, 70.0), 28),
                Stroke::line([0.5, 0.1], [0.5, 0.9], tilt(0.2, 0.0), tilt(0.3, 0.0), 30),
                curve(
                    &[[0.48, 0.38], [0.4, 0.52], [0.3, 0.65], [0.15, 0.75]],
                    tilt(0.2, 30.0),
                    tilt(0.4, 60.0),
                    20,
                ),
                curve(
                    &[[0.52, 0.38], [0.6, 0.52], [0.7, 0.65], [0.85, 0.75]],
                    tilt(0.2, -30.0),
                    tilt(0.4, -60.0),
                    20,
                ),
            ],
            rest: [0.9, 0.9],
        },
        "eternal5" => CharacterTemplate {
            id: id.into(),
            strokes: vec![
                Stroke::line([0.46, 0.08], [0.53, 0.16], tilt(0.3, 45.0), tilt(0.3, 45.0), 8),
                curve(
                    &[
                        [0.5, 0.24],
                        [0.5, 0.45],
                        [0.5, 0.65],
                        [0.5, 0.86],
                        [0.47, 0.84],
                        [0.44, 0.82],
                        [0.41, 0.8],
                    ],
                    tilt(0.2, 0.0),
                    tilt(0.35, 30.0),
                    30,
                ),
                curve(
                    &[
                        [0.24, 0.4],
                        [0.3, 0.4],
                        [0.36, 0.4],
                        [0.42, 0.4],
                        [0.36, 0.5],
                        [0.3, 0.6],
                        [0.2, 0.7],
                    ],
                    tilt(0.2, 90.0),
                    tilt(0.35, 45.0),
                    20,
                ),
                curve(
                    &[[0.76, 0.32], [0.7, 0.4], [0.62, 0.46], [0.56, 0.5]],
                    tilt(0.25, -45.0),
                    tilt(0.3, -45.0),
                    12,
                ),
                curve(
                    &[[0.56, 0.48], [0.64, 0.6], [0.72, 0.72], [0.84, 0.84]],
                    tilt(0.2, -30.0),
                    tilt(0.4, -60.0),
                    18,
                ),
            ],
            rest: [0.9, 0.92],
        },
        other => {
            return Err(Error::config(format!(
                "unknown template {other:?}; built-ins are {BUILTIN_TEMPLATES:?}"
            )))
        }
    };
    t.validate()?;
    Ok(t)
}
