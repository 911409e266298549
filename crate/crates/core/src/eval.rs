//! Closed-loop rollout in the simulator, open-loop evaluation on recorded
//! demonstrations, metrics, plots and the ablation harness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{augment_pose, AugmentConfig, ImageJitter};
use crate::error::{Error, Result};
use crate::geometry::{quat_angular_distance, PoseState, PoseTrajectory};
use crate::imageio::Rgb8;
use crate::model::{ModelConfig, Policy, PolicyCheckpoint};
use crate::rng::{self, Rng};
use crate::sim::{builtin, render_observation, replay_canvas, rest_pose, Canvas, Demonstration, Observation, SimConfig};
use crate::tensor::Tensor;
use crate::train::{context_window, train, StopReason, TrainConfig, TrainSetup};

/// Workspace box outside which a rollout is abandoned.
pub const BOUNDS: (f64, f64) = (-0.1, 1.1);
/// Distance to the rest pose that counts as "arrived".
pub const COMPLETION_TOLERANCE: f64 = 0.02;
/// Consecutive arrived steps that end a rollout.
pub const COMPLETION_STEPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Budget,
    PoseOutOfBounds,
    Completion,
    /// The policy produced a non-finite pose.
    NonFinite,
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// Executed poses, starting with `s₀`.
    pub trajectory: PoseTrajectory,
    /// What the policy saw at each step.
    pub observations: Vec<Observation>,
    pub canvas: Canvas,
    pub steps: usize,
    pub termination: Termination,
}

/// Perturbations applied to what the policy observes during a rollout; the
/// simulator state itself stays clean.
#[derive(Clone, Debug, Default)]
pub struct ObservationNoise {
    /// Pose noise (uses `sigma_translation` / `sigma_rotation`).
    pub pose: Option<AugmentConfig>,
    /// Per-step camera jitter.
    pub image: Option<AugmentConfig>,
    pub seed: u64,
}

impl ObservationNoise {
    pub fn none() -> Self {
        ObservationNoise::default()
    }
}

fn in_bounds(p: &PoseState) -> bool {
    p.translation.iter().all(|v| (BOUNDS.0..=BOUNDS.1).contains(v))
}

/// Translation and tilt both within [`COMPLETION_TOLERANCE`] of `rest`.
pub fn at_rest(p: &PoseState, rest: &PoseState) -> bool {
    p.translation_distance(rest) <= COMPLETION_TOLERANCE
        && quat_angular_distance(p.rotation, rest.rotation) <= COMPLETION_TOLERANCE
}

fn pose_row(p: &PoseState) -> Tensor {
    Tensor::new(vec![1, 7], p.to_vec7().to_vec()).expect("pose row")
}

fn with_batch_axis(img: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    img.reshape(&shape).expect("same element count")
}

/// Runs the policy in closed loop from `s0`: render, encode (posterior
/// mean), predict the next pose, move the pen, repeat.
pub fn rollout(
    policy: &Policy,
    sim: &SimConfig,
    rest: &PoseState,
    s0: PoseState,
    max_steps: usize,
    noise: &ObservationNoise,
) -> Result<RolloutResult> {
    let cfg = &policy.config;
    if [cfg.image_height, cfg.image_width] != [sim.image_height, sim.image_width] {
        return Err(Error::config(format!(
            "checkpoint expects {}×{} images, simulator renders {}×{}",
            cfg.image_height, cfg.image_width, sim.image_height, sim.image_width
        )));
    }
    let mut rng: Rng = rng::stream(noise.seed, rng::streams::ROLLOUT);
    let mut canvas = Canvas::blank(sim.image_height, sim.image_width);
    canvas.stamp(&s0, sim);
    let mut poses = vec![s0];
    let mut observations = Vec::new();
    let mut latents: Vec<Tensor> = Vec::new();
    let mut arrived = 0;
    let mut termination = Termination::Budget;

    for t in 0..max_steps {
        let current = poses[t];
        let mut obs = render_observation(&canvas, &current, sim);
        if let Some(aug) = &noise.image {
            obs.image = ImageJitter::draw(aug, &mut rng).apply(&obs.image);
        }
        if let Some(aug) = &noise.pose {
            let aug = AugmentConfig {
                pose_noise: true,
                ..aug.clone()
            };
            obs.pose = augment_pose(&obs.pose, &aug, &mut rng);
        }
        latents.push(policy.encode_mean(&with_batch_axis(&obs.image), &pose_row(&obs.pose))?);
        observations.push(obs);
        let window: Vec<Tensor> = context_window(t, cfg.window)
            .into_iter()
            .map(|i| latents[i].clone())
            .collect();
        let next = match policy.predict(&window) {
            Ok(mut p) => p.remove(0).pose,
            Err(Error::DegenerateRotation(_)) => {
                termination = Termination::NonFinite;
                break;
            }
            Err(e) => return Err(e),
        };
        if !next.translation.iter().all(|v| v.is_finite()) || !next.rotation.is_finite() {
            termination = Termination::NonFinite;
            break;
        }
        canvas.advance(&current, &next, sim);
        poses.push(next);
        if !in_bounds(&next) {
            termination = Termination::PoseOutOfBounds;
            break;
        }
        arrived = if at_rest(&next, rest) { arrived + 1 } else { 0 };
        if arrived >= COMPLETION_STEPS {
            termination = Termination::Completion;
            break;
        }
    }
    Ok(RolloutResult {
        steps: poses.len() - 1,
        trajectory: PoseTrajectory::new(poses),
        observations,
        canvas,
        termination,
    })
}

fn arc_resample(points: &[[f64; 3]], n: usize) -> Vec<[f64; 3]> {
    let mut cum = vec![0.0; points.len()];
    for i in 1..points.len() {
        let d: f64 = (0..3).map(|k| (points[i][k] - points[i - 1][k]).powi(2)).sum::<f64>().sqrt();
        cum[i] = cum[i - 1] + d;
    }
    let total = *cum.last().expect("nonempty");
    if total == 0.0 || n == 1 {
        return vec![points[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    for j in 0..n {
        let s = total * j as f64 / (n - 1) as f64;
        while seg + 2 < points.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        out.push([0, 1, 2].map(|k| points[seg][k] + (points[seg + 1][k] - points[seg][k]) * u));
    }
    out
}

/// Translation RMSE after resampling both paths to a common number of
/// points spaced uniformly in arc length.
pub fn trajectory_rmse(a: &PoseTrajectory, b: &PoseTrajectory) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Usage("trajectory_rmse needs nonempty trajectories".into()));
    }
    let n = a.len().max(b.len());
    let ra = arc_resample(&a.translations(), n);
    let rb = arc_resample(&b.translations(), n);
    let ss: f64 = ra
        .iter()
        .zip(&rb)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    Ok((ss / n as f64).sqrt())
}

/// Intersection over union of pixels carrying at least `threshold` ink;
/// two empty canvases score 1.
pub fn canvas_iou(result: &Canvas, expert: &Canvas, threshold: f64) -> Result<f64> {
    if (result.height, result.width) != (expert.height, expert.width) {
        return Err(Error::Shape {
            op: "canvas_iou",
            lhs: vec![result.height, result.width],
            rhs: vec![expert.height, expert.width],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (a, b) in result.ink().zip(expert.ink()) {
        let (a, b) = (a >= threshold, b >= threshold);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub const DEFAULT_INK_THRESHOLD: f64 = 0.5;

/// For each expert stroke (pen-down run), whether at least half of its ink
/// pixels are also inked in `result`.
pub fn stroke_completion(expert_poses: &[PoseState], result: &Canvas, sim: &SimConfig) -> Vec<bool> {
    let mut flags = Vec::new();
    let mut i = 0;
    while i < expert_poses.len() {
        if !expert_poses[i].pen_down {
            i += 1;
            continue;
        }
        let start = i;
        while i < expert_poses.len() && expert_poses[i].pen_down {
            i += 1;
        }
        let stroke = replay_canvas(&expert_poses[start..i], sim);
        let mut total = 0usize;
        let mut hit = 0usize;
        for (e, r) in stroke.ink().zip(result.ink()) {
            if e >= DEFAULT_INK_THRESHOLD {
                total += 1;
                hit += usize::from(r >= DEFAULT_INK_THRESHOLD);
            }
        }
        flags.push(total > 0 && 2 * hit >= total);
    }
    flags
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopEntry {
    pub template_id: String,
    pub style_seed: u64,
    pub translation_rmse: f64,
    pub rotation_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopEntry {
    pub template_id: String,
    pub style_seed: u64,
    pub translation_rmse: f64,
    pub canvas_iou: f64,
    pub stroke_completion: Vec<bool>,
    pub termination: Termination,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean open-loop translation RMSE over demonstrations.
    pub open_loop_translation_rmse: Option<f64>,
    /// Mean open-loop angular error (radians).
    pub open_loop_rotation_error: Option<f64>,
    pub closed_loop_translation_rmse: Option<f64>,
    pub closed_loop_iou: Option<f64>,
    pub open_loop: Vec<OpenLoopEntry>,
    pub closed_loop: Vec<ClosedLoopEntry>,
    pub plots: Vec<PathBuf>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

impl EvalReport {
    fn summarize(&mut self) {
        self.open_loop_translation_rmse = mean(self.open_loop.iter().map(|e| e.translation_rmse));
        self.open_loop_rotation_error = mean(self.open_loop.iter().map(|e| e.rotation_error));
        self.closed_loop_translation_rmse = mean(self.closed_loop.iter().map(|e| e.translation_rmse));
        self.closed_loop_iou = mean(self.closed_loop.iter().map(|e| e.canvas_iou));
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One-step-ahead predictions for every recorded transition of `demo`.
pub fn open_loop_predictions(policy: &Policy, demo: &Demonstration) -> Result<Vec<PoseState>> {
    if demo.len() < 2 {
        return Err(Error::config("open-loop evaluation needs demonstrations of at least 2 steps"));
    }
    let images: Vec<&Tensor> = demo.observations.iter().map(|o| &o.image).collect();
    let poses: Vec<Vec<f64>> = demo.observations.iter().map(|o| o.pose.to_vec7().to_vec()).collect();
    let mu = policy.encode_mean(&Tensor::stack(&images)?, &Tensor::from_rows(&poses)?)?;
    let steps = demo.len() - 1;
    let w = policy.config.window;
    let windows: Vec<Vec<usize>> = (0..steps).map(|i| context_window(i, w)).collect();
    let mut inputs = Vec::with_capacity(w);
    for k in 0..w {
        let rows: Vec<Vec<f64>> = windows.iter().map(|win| mu.row(win[k]).to_vec()).collect();
        inputs.push(Tensor::from_rows(&rows)?);
    }
    Ok(policy.predict(&inputs)?.into_iter().map(|p| p.pose).collect())
}

fn open_loop_entry(policy: &Policy, demo: &Demonstration) -> Result<(OpenLoopEntry, Vec<PoseState>)> {
    let pred = open_loop_predictions(policy, demo)?;
    let truth = &demo.observations[1..];
    let n = pred.len() as f64;
    let ss: f64 = pred.iter().zip(truth).map(|(p, o)| p.translation_distance(&o.pose).powi(2)).sum();
    let rot: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, o)| quat_angular_distance(p.rotation, o.pose.rotation))
        .sum();
    Ok((
        OpenLoopEntry {
            template_id: demo.template_id.clone(),
            style_seed: demo.style_seed,
            translation_rmse: (ss / n).sqrt(),
            rotation_error: rot / n,
        },
        pred,
    ))
}

/// Predicts each next state from recorded context; optionally writes the
/// x-y overlay (red = inference, blue = ground truth) to `plot`.
pub fn open_loop_eval(policy: &Policy, demos: &[Demonstration], plot: Option<&Path>) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut panels = Vec::new();
    for demo in demos {
        let (entry, pred) = open_loop_entry(policy, demo)?;
        report.open_loop.push(entry);
        panels.push(Panel {
            truth: demo.poses(),
            inference: std::iter::once(demo.observations[0].pose).chain(pred).collect(),
        });
    }
    if let Some(path) = plot {
        overlay_plot(&[panels], path)?;
        report.plots.push(path.to_path_buf());
    }
    report.summarize();
    Ok(report)
}

/// Rollout budget used when none is given: three times the expert length.
pub fn default_budget(demo: &Demonstration) -> usize {
    3 * demo.len()
}

/// Rolls out from each demonstration's first pose and compares against it.
pub fn closed_loop_eval(
    policy: &Policy,
    sim: &SimConfig,
    demos: &[Demonstration],
    max_steps: Option<usize>,
    noise: &ObservationNoise,
    plot: Option<&Path>,
) -> Result<(EvalReport, Vec<RolloutResult>)> {
    let mut report = EvalReport::default();
    let mut panels = Vec::new();
    let mut results = Vec::new();
    for demo in demos {
        let template = builtin(&demo.template_id)?;
        let rest = rest_pose(&template, sim);
        let budget = max_steps.unwrap_or_else(|| default_budget(demo));
        let r = rollout(policy, sim, &rest, demo.observations[0].pose, budget, noise)?;
        let expert = PoseTrajectory::new(demo.poses());
        report.closed_loop.push(ClosedLoopEntry {
            template_id: demo.template_id.clone(),
            style_seed: demo.style_seed,
            translation_rmse: trajectory_rmse(&r.trajectory, &expert)?,
            canvas_iou: canvas_iou(&r.canvas, &demo.final_canvas, DEFAULT_INK_THRESHOLD)?,
            stroke_completion: stroke_completion(&expert.poses, &r.canvas, sim),
            termination: r.termination,
            steps: r.steps,
        });
        panels.push(Panel {
            truth: expert.poses,
            inference: r.trajectory.poses.clone(),
        });
        results.push(r);
    }
    if let Some(path) = plot {
        overlay_plot(&[panels], path)?;
        report.plots.push(path.to_path_buf());
    }
    report.summarize();
    Ok((report, results))
}

/// A pair of x-y paths drawn into one plot cell.
#[derive(Clone, Debug)]
pub struct Panel {
    pub truth: Vec<PoseState>,
    pub inference: Vec<PoseState>,
}

const CELL: usize = 200;
const RED: [u8; 3] = [220, 30, 30];
const BLUE: [u8; 3] = [30, 60, 220];
const GREY: [u8; 3] = [200, 200, 200];

fn draw_path(img: &mut Rgb8, poses: &[PoseState], ox: usize, oy: usize, color: [u8; 3]) {
    let to_px = |p: &PoseState| {
        let c = |v: f64| v.clamp(BOUNDS.0, BOUNDS.1) * (CELL as f64 - 20.0) + 10.0;
        (ox as f64 + c(p.translation[0]), oy as f64 + c(p.translation[1]))
    };
    for w in poses.windows(2) {
        let thick = if w[0].pen_down && w[1].pen_down { 3 } else { 1 };
        img.line(to_px(&w[0]), to_px(&w[1]), color, thick);
    }
}

/// Grid of x-y overlays, one row per entry of `rows`, one panel per
/// character: ground truth in blue, inference in red.
pub fn overlay_plot(rows: &[Vec<Panel>], path: &Path) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut img = Rgb8::new(cols * CELL, rows.len().max(1) * CELL, [255, 255, 255]);
    for (r, row) in rows.iter().enumerate() {
        for (c, panel) in row.iter().enumerate() {
            let (ox, oy) = (c * CELL, r * CELL);
            for k in 0..CELL {
                img.put((ox + k) as i64, (oy + CELL - 1) as i64, GREY);
                img.put((ox + CELL - 1) as i64, (oy + k) as i64, GREY);
            }
            draw_path(&mut img, &panel.truth, ox, oy, BLUE);
            draw_path(&mut img, &panel.inference, ox, oy, RED);
        }
    }
    img.save(path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoBilstm,
    NoVariational,
    ResnetOnly,
    NoImageAug,
    NoPoseAug,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::NoBilstm,
        AblationVariant::NoVariational,
        AblationVariant::ResnetOnly,
        AblationVariant::NoImageAug,
        AblationVariant::NoPoseAug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoBilstm => "no_bilstm",
            AblationVariant::NoVariational => "no_variational",
            AblationVariant::ResnetOnly => "resnet_only",
            AblationVariant::NoImageAug => "no_image_aug",
            AblationVariant::NoPoseAug => "no_pose_aug",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation variant {s:?}")))
    }

    /// The model and augmentation settings for this variant.
    pub fn apply(self, model: &ModelConfig, aug: &AugmentConfig) -> (ModelConfig, AugmentConfig) {
        let (mut m, mut a) = (model.clone(), aug.clone());
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoBilstm => m.bidirectional = false,
            AblationVariant::NoVariational => m.variational = false,
            AblationVariant::ResnetOnly => m.use_fpn = false,
            AblationVariant::NoImageAug => {
                a.shift = false;
                a.color_jitter = false;
            }
            AblationVariant::NoPoseAug => a.pose_noise = false,
        }
        (m, a)
    }
}

#[derive(Clone, Debug)]
pub struct AblationRun {
    pub variant: AblationVariant,
    pub checkpoint: PolicyCheckpoint,
    pub report: EvalReport,
    pub stop: StopReason,
}

/// Trains `variant` with the shared seed and budget, then evaluates it open
/// loop on `eval_demos` and closed loop under `noise`. With `plot_dir`,
/// writes `<variant>.png` holding an open-loop row and a closed-loop row.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    variant: AblationVariant,
    train_demos: &[Demonstration],
    sim: &SimConfig,
    model: &ModelConfig,
    augment: &AugmentConfig,
    train_cfg: &TrainConfig,
    seed: u64,
    eval_demos: &[Demonstration],
    noise: &ObservationNoise,
    plot_dir: Option<&Path>,
) -> Result<AblationRun> {
    let (m, a) = variant.apply(model, augment);
    let outcome = train(&TrainSetup {
        demos: train_demos,
        sim,
        model: &m,
        augment: &a,
        train: train_cfg,
        seed,
    })?;
    let policy = outcome.checkpoint.policy()?;
    let open = open_loop_eval(&policy, eval_demos, None)?;
    let (closed, rollouts) = closed_loop_eval(&policy, sim, eval_demos, None, noise, None)?;
    let mut report = EvalReport {
        open_loop: open.open_loop,
        closed_loop: closed.closed_loop,
        ..EvalReport::default()
    };
    if let Some(dir) = plot_dir {
        let mut open_row = Vec::new();
        for demo in eval_demos {
            let pred = open_loop_predictions(&policy, demo)?;
            open_row.push(Panel {
                truth: demo.poses(),
                inference: std::iter::once(demo.observations[0].pose).chain(pred).collect(),
            });
        }
        let closed_row = eval_demos
            .iter()
            .zip(&rollouts)
            .map(|(d, r)| Panel {
                truth: d.poses(),
                inference: r.trajectory.poses.clone(),
            })
            .collect();
        let path = dir.join(format!("{}.png", variant.name()));
        overlay_plot(&[open_row, closed_row], &path)?;
        report.plots.push(path);
    }
    report.summarize();
    Ok(AblationRun {
        variant,
        checkpoint: outcome.checkpoint,
        report,
        stop: outcome.stop,
    })
}
