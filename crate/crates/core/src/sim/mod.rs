//! Synthetic expert: stroke templates, ink simulation and the third-person
//! camera, standing in for a human demonstrator and a physical arm.

mod canvas;
mod dataset;
mod template;

pub use canvas::{quantize, render_image, Canvas, LEVELS};
pub use dataset::{read_dataset, read_manifest, write_dataset, DatasetManifest, DATASET_SCHEMA_VERSION};
pub use template::{builtin, CharacterTemplate, Stroke, BUILTIN_TEMPLATES};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseState, Quat};
use crate::rng;
use crate::tensor::Tensor;

/// Number of image channels rendered by the camera.
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Ink disc radius in pixels.
    pub footprint_radius: f64,
    /// Pen height while travelling between strokes.
    pub travel_height: f64,
    /// Steps spent lowering / raising the pen at each stroke end.
    pub lift_steps: usize,
    /// Steps for each pen-up move (between strokes and to the rest pose).
    pub travel_steps: usize,
    /// Steps the expert holds the rest pose at the end.
    pub hold_steps: usize,
    /// Marker length in pixels per unit of horizontal pen-axis component.
    pub marker_gain: f64,
    /// Radius in pixels of the height cue disc.
    pub cue_radius: f64,
    /// Maximum control-point displacement per axis between demonstrations.
    pub style_jitter: f64,
    /// Maximum per-component tilt perturbation (radians).
    pub tilt_jitter: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            image_height: 64,
            image_width: 64,
            footprint_radius: 1.5,
            travel_height: 0.1,
            lift_steps: 3,
            travel_steps: 8,
            hold_steps: 8,
            marker_gain: 12.0,
            cue_radius: 2.0,
            style_jitter: 0.02,
            tilt_jitter: 0.03,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_height < 8 || self.image_width < 8 {
            return Err(Error::config("simulator images must be at least 8×8"));
        }
        if !(self.footprint_radius > 0.0) || !(self.travel_height > crate::geometry::CONTACT_THRESHOLD) {
            return Err(Error::config(
                "footprint radius must be positive and travel height above the contact threshold",
            ));
        }
        if self.lift_steps == 0 || self.travel_steps == 0 {
            return Err(Error::config("lift_steps and travel_steps must be positive"));
        }
        if self.style_jitter < 0.0 || self.tilt_jitter < 0.0 {
            return Err(Error::config("jitter magnitudes must be nonnegative"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [CHANNELS, self.image_height, self.image_width]
    }
}

/// Jitter magnitudes for one demonstration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StyleJitter {
    pub control_points: f64,
    pub tilt: f64,
}

impl StyleJitter {
    pub const NONE: StyleJitter = StyleJitter {
        control_points: 0.0,
        tilt: 0.0,
    };

    pub fn from_config(cfg: &SimConfig) -> Self {
        StyleJitter {
            control_points: cfg.style_jitter,
            tilt: cfg.tilt_jitter,
        }
    }
}

/// One camera frame plus the pen pose it was captured at.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `[3 × H × W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub pose: PoseState,
}

pub fn render_observation(canvas: &Canvas, pose: &PoseState, cfg: &SimConfig) -> Observation {
    Observation {
        image: render_image(canvas, pose, cfg),
        pose: *pose,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demonstration {
    pub template_id: String,
    pub style_seed: u64,
    pub observations: Vec<Observation>,
    pub pen_down: Vec<bool>,
    pub final_canvas: Canvas,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn poses(&self) -> Vec<PoseState> {
        self.observations.iter().map(|o| o.pose).collect()
    }
}

fn lerp2(a: [f64; 2], b: [f64; 2], t: f64) -> [f64; 2] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

fn canonical(q: Quat) -> Quat {
    crate::geometry::quat_normalize(q.to_array()).expect("tilt quaternions are unit")
}

/// Spherical-free rotation blend: normalized linear interpolation, adequate
/// for the small tilt changes between strokes.
fn nlerp(a: Quat, b: Quat, t: f64) -> Quat {
    let b = if a.dot(b) < 0.0 { b.neg() } else { b };
    let q = [0, 1, 2, 3].map(|i| a.to_array()[i] + (b.to_array()[i] - a.to_array()[i]) * t);
    canonical(Quat::from_array(q))
}

/// Expert pen-tip path for a (possibly jittered) template: hover above the
/// first stroke, then for each stroke lower, draw, raise, and travel at
/// `travel_height`; finally travel to the rest point and hold there.
pub fn expert_poses(template: &CharacterTemplate, cfg: &SimConfig) -> Vec<PoseState> {
    let zt = cfg.travel_height;
    let lift = cfg.lift_steps;
    let mut poses = Vec::new();
    let first = &template.strokes[0];
    let mut tilt = canonical(first.tilt_at(0.0));
    let s0 = first.start();
    poses.push(PoseState::new([s0[0], s0[1], zt], tilt));

    for (si, stroke) in template.strokes.iter().enumerate() {
        let start = stroke.start();
        let start_tilt = canonical(stroke.tilt_at(0.0));
        if si > 0 {
            let from = *poses.last().expect("nonempty");
            let from_xy = [from.translation[0], from.translation[1]];
            for k in 1..=cfg.travel_steps {
                let t = k as f64 / cfg.travel_steps as f64;
                let xy = lerp2(from_xy, start, t);
                poses.push(PoseState::new([xy[0], xy[1], zt], nlerp(tilt, start_tilt, t)));
            }
        }
        for k in 1..=lift {
            let z = zt * (1.0 - k as f64 / lift as f64);
            poses.push(PoseState::new([start[0], start[1], z], start_tilt));
        }
        for (p, frac) in stroke.sample_uniform().into_iter().skip(1) {
            poses.push(PoseState::new([p[0], p[1], 0.0], canonical(stroke.tilt_at(frac))));
        }
        let end = stroke.end();
        tilt = canonical(stroke.tilt_at(1.0));
        for k in 1..=lift {
            let z = zt * k as f64 / lift as f64;
            poses.push(PoseState::new([end[0], end[1], z], tilt));
        }
    }

    let from = *poses.last().expect("nonempty");
    let from_xy = [from.translation[0], from.translation[1]];
    for k in 1..=cfg.travel_steps {
        let t = k as f64 / cfg.travel_steps as f64;
        let xy = lerp2(from_xy, template.rest, t);
        poses.push(PoseState::new([xy[0], xy[1], zt], nlerp(tilt, Quat::IDENTITY, t)));
    }
    let rest = rest_pose(template, cfg);
    poses.extend(std::iter::repeat_n(rest, cfg.hold_steps));
    poses
}

/// Where a finished character leaves the pen.
pub fn rest_pose(template: &CharacterTemplate, cfg: &SimConfig) -> PoseState {
    PoseState::new([template.rest[0], template.rest[1], cfg.travel_height], Quat::IDENTITY)
}

/// Runs poses through the ink simulation and camera, returning every frame
/// and the final canvas.
pub fn simulate(poses: &[PoseState], cfg: &SimConfig) -> (Vec<Observation>, Canvas) {
    let mut canvas = Canvas::blank(cfg.image_height, cfg.image_width);
    let mut obs = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        if i == 0 {
            canvas.stamp(pose, cfg);
        } else {
            canvas.advance(&poses[i - 1], pose, cfg);
        }
        obs.push(render_observation(&canvas, pose, cfg));
    }
    (obs, canvas)
}

/// Canvas produced by a pose sequence (ink only, no rendering).
pub fn replay_canvas(poses: &[PoseState], cfg: &SimConfig) -> Canvas {
    let mut canvas = Canvas::blank(cfg.image_height, cfg.image_width);
    for (i, pose) in poses.iter().enumerate() {
        if i == 0 {
            canvas.stamp(pose, cfg);
        } else {
            canvas.advance(&poses[i - 1], pose, cfg);
        }
    }
    canvas
}

/// One expert demonstration of `template` in the style selected by
/// `style_seed`.
pub fn generate_demonstration(
    template: &CharacterTemplate,
    style_seed: u64,
    jitter: StyleJitter,
    cfg: &SimConfig,
) -> Result<Demonstration> {
    template.validate()?;
    cfg.validate()?;
    let mut rng = rng::stream(style_seed, rng::streams::DATA);
    let styled = template.jittered(jitter.control_points, jitter.tilt, &mut rng);
    let poses = expert_poses(&styled, cfg);
    if let Some(bad) = poses.iter().position(|p| !p.is_valid()) {
        return Err(Error::config(format!("generated pose {bad} violates pose invariants")));
    }
    let (observations, final_canvas) = simulate(&poses, cfg);
    Ok(Demonstration {
        template_id: template.id.clone(),
        style_seed,
        pen_down: poses.iter().map(|p| p.pen_down).collect(),
        observations,
        final_canvas,
    })
}
