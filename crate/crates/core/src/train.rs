//! Behavior-cloning loop: sample consecutive state pairs, augment, run the
//! model, take an Adam step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_pose, AugmentConfig, ImageJitter};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{forward, sample_eps, Batch, ModelConfig, ParamStore, PolicyCheckpoint, LOSS_COMPONENTS};
use crate::rng::{self, Rng};
use crate::sim::{Demonstration, SimConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Maximum number of optimizer steps.
    pub steps: usize,
    pub learning_rate: f64,
    /// Cosine-anneal the learning rate down to this fraction of its initial
    /// value over the step budget (1 keeps it constant).
    pub final_lr_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm bound.
    pub clip_norm: f64,
    /// Emit an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_interval: usize,
    /// Steps per convergence window.
    pub patience: usize,
    /// Stop once the mean loss of a window improves on the previous window
    /// by less than this fraction.
    pub threshold: f64,
    /// Log zero wall time so logs are reproducible byte for byte.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 5000,
            learning_rate: 1e-3,
            final_lr_fraction: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            checkpoint_interval: 0,
            patience: 500,
            threshold: 1e-3,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    /// Learning rate for optimizer step `step`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.final_lr_fraction == 1.0 || self.steps <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("train.learning_rate must be finite and nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::config("train.final_lr_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::config("Adam moments must lie in [0, 1) and adam_eps must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm must be positive"));
        }
        if self.patience == 0 || !(self.threshold >= 0.0) {
            return Err(Error::config("train.patience must be positive and threshold nonnegative"));
        }
        Ok(())
    }
}

/// One sampled training pair: a context window (oldest first, left-padded
/// with step 0) ending at `target − 1`, and the target step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSample {
    pub demo: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

/// Context window of length `window` ending at step `i`.
pub fn context_window(i: usize, window: usize) -> Vec<usize> {
    (0..window).map(|k| (i + k + 1).saturating_sub(window)).collect()
}

/// Draws `batch_size` pairs uniformly over all `(demo, i)` with `i + 1` in
/// range.
pub fn sample_batch(lengths: &[usize], batch_size: usize, window: usize, rng: &mut Rng) -> Result<Vec<PairSample>> {
    if let Some(d) = lengths.iter().position(|&l| l < 2) {
        return Err(Error::config(format!("demonstration {d} has fewer than 2 steps")));
    }
    let pairs: Vec<usize> = lengths.iter().map(|l| l - 1).collect();
    let total: usize = pairs.iter().sum();
    if total == 0 {
        return Err(Error::config("dataset is empty"));
    }
    let mut out = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let mut k = rng.random_range(0..total);
        let mut demo = 0;
        while k >= pairs[demo] {
            k -= pairs[demo];
            demo += 1;
        }
        out.push(PairSample {
            demo,
            context: context_window(k, window),
            target: k + 1,
        });
    }
    Ok(out)
}

/// Builds the tensors for `samples`, applying augmentation: one image
/// jitter draw per pair (shared by its context and target frames) and
/// independent pose noise per context observation.
pub fn assemble_batch(
    demos: &[Demonstration],
    samples: &[PairSample],
    aug: &AugmentConfig,
    rng: &mut Rng,
) -> Result<Batch> {
    let window = samples.first().map_or(0, |s| s.context.len());
    let mut images: Vec<Tensor> = Vec::new();
    let mut poses: Vec<Vec<f64>> = Vec::new();
    let mut rows = vec![Vec::with_capacity(samples.len()); window];
    let mut target_images = Vec::with_capacity(samples.len());
    let mut target_poses = Vec::with_capacity(samples.len());
    for s in samples {
        let demo = &demos[s.demo];
        let jitter = if aug.image_enabled() {
            ImageJitter::draw(aug, rng)
        } else {
            ImageJitter::IDENTITY
        };
        let mut local: Vec<(usize, usize)> = Vec::new();
        for (k, &step) in s.context.iter().enumerate() {
            let row = match local.iter().find(|(st, _)| *st == step) {
                Some(&(_, r)) => r,
                None => {
                    let obs = &demo.observations[step];
                    images.push(if aug.image_enabled() {
                        jitter.apply(&obs.image)
                    } else {
                        obs.image.clone()
                    });
                    poses.push(augment_pose(&obs.pose, aug, rng).to_vec7().to_vec());
                    local.push((step, images.len() - 1));
                    images.len() - 1
                }
            };
            rows[k].push(row);
        }
        let target = &demo.observations[s.target];
        target_images.push(if aug.image_enabled() {
            jitter.apply(&target.image)
        } else {
            target.image.clone()
        });
        let tp = if aug.noisy_targets {
            augment_pose(&target.pose, aug, rng)
        } else {
            target.pose
        };
        target_poses.push(tp.to_vec7().to_vec());
    }
    let image_refs: Vec<&Tensor> = images.iter().collect();
    let target_refs: Vec<&Tensor> = target_images.iter().collect();
    Ok(Batch {
        images: Tensor::stack(&image_refs)?,
        poses: Tensor::from_rows(&poses)?,
        window: rows,
        target_images: Tensor::stack(&target_refs)?,
        target_poses: Tensor::from_rows(&target_poses)?,
    })
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter").data_mut();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `bound`; returns the
/// resulting norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, bound: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= bound || !norm.is_finite() {
        return norm;
    }
    let s = bound / (norm * (1.0 + 1e-12));
    grads.values_mut().flatten().for_each(|g| *g *= s);
    global_norm(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub total: f64,
    pub mae_t: f64,
    pub mse_t: f64,
    pub mae_r: f64,
    pub mse_r: f64,
    pub mse_img: f64,
    pub kl: f64,
    /// After clipping.
    pub grad_norm: f64,
    pub seconds: f64,
}

pub const TRAIN_LOG_HEADER: &str = "step,total,mae_t,mse_t,mae_r,mse_r,mse_img,kl,grad_norm,seconds";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRAIN_LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step, r.total, r.mae_t, r.mse_t, r.mae_r, r.mse_r, r.mse_img, r.kl, r.grad_norm, r.seconds
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TRAIN_LOG_HEADER) {
            return Err(Error::format(path, "unexpected train log header"));
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::format(path, format!("malformed row {}", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            records.push(TrainRecord {
                step: f[0].parse().map_err(|_| bad())?,
                total: num(1)?,
                mae_t: num(2)?,
                mse_t: num(3)?,
                mae_r: num(4)?,
                mse_r: num(5)?,
                mse_img: num(6)?,
                kl: num(7)?,
                grad_norm: num(8)?,
                seconds: num(9)?,
            });
        }
        Ok(TrainLog { records })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Budget,
    Converged,
    /// The loss became NaN; the returned checkpoint is the last good one.
    Diverged(BTreeMap<String, f64>),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PolicyCheckpoint,
    pub log: TrainLog,
    pub stop: StopReason,
}

/// Checks that demonstrations can train a model of this shape.
pub fn check_dataset(demos: &[Demonstration], model: &ModelConfig) -> Result<()> {
    if demos.is_empty() {
        return Err(Error::config("training needs at least one demonstration"));
    }
    let want = model.image_shape();
    for (i, d) in demos.iter().enumerate() {
        if d.len() < 2 {
            return Err(Error::config(format!("demonstration {i} has fewer than 2 steps")));
        }
        let got = d.observations[0].image.shape();
        if got != want {
            return Err(Error::config(format!(
                "demonstration {i} has images of shape {got:?}, model expects {want:?}"
            )));
        }
    }
    Ok(())
}

/// Relative improvement between the last two windows of `patience` losses.
fn converged(totals: &[f64], patience: usize, threshold: f64) -> bool {
    let n = totals.len();
    if n < 2 * patience || n % patience != 0 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&totals[n - 2 * patience..n - patience]);
    let cur = mean(&totals[n - patience..]);
    (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < threshold
}

pub struct TrainSetup<'a> {
    pub demos: &'a [Demonstration],
    pub sim: &'a SimConfig,
    pub model: &'a ModelConfig,
    pub augment: &'a AugmentConfig,
    pub train: &'a TrainConfig,
    pub seed: u64,
}

/// Runs training to the step budget or convergence.
pub fn train(setup: &TrainSetup) -> Result<TrainOutcome> {
    train_with(setup, |_| Ok(()))
}

/// As [`train`], calling `on_checkpoint` every `checkpoint_interval` steps.
pub fn train_with(
    setup: &TrainSetup,
    mut on_checkpoint: impl FnMut(&PolicyCheckpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let TrainSetup {
        demos,
        sim,
        model,
        augment,
        train: cfg,
        seed,
    } = *setup;
    cfg.validate()?;
    model.validate()?;
    augment.validate(model.image_height, model.image_width)?;
    check_dataset(demos, model)?;

    let mut ck = PolicyCheckpoint::initial(model.clone(), sim.clone(), seed)?;
    let lengths: Vec<usize> = demos.iter().map(Demonstration::len).collect();
    let mut sampling = rng::stream(seed, rng::streams::SAMPLING);
    let mut aug_rng = rng::stream(seed, rng::streams::AUGMENT);
    let mut noise = rng::stream(seed, rng::streams::NOISE);
    let mut adam = Adam::new(cfg);
    let mut log = TrainLog::default();
    let mut totals = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    let samples_per_step = if model.variational { model.mc_samples } else { 1 };

    for step in 0..cfg.steps {
        let pairs = sample_batch(&lengths, cfg.batch_size, model.window, &mut sampling)?;
        let batch = assemble_batch(demos, &pairs, augment, &mut aug_rng)?;
        let rows = batch.images.shape()[0];
        let eps: Vec<Tensor> = (0..samples_per_step)
            .map(|_| sample_eps(rows, model.latent_dim, &mut noise))
            .collect();

        let mut tape = Tape::new();
        let bound = ck.params.bind(&mut tape);
        let fwd = forward(&mut tape, &bound, model, &batch, &eps)?;
        let values = match fwd.loss.values(&tape) {
            Ok(v) => v,
            Err(Error::Divergence(map)) => {
                return Ok(TrainOutcome {
                    checkpoint: ck,
                    log,
                    stop: StopReason::Diverged(map),
                })
            }
            Err(e) => return Err(e),
        };
        let mut grads_raw = tape.backward(fwd.loss.total)?;
        let mut grads = bound.collect_grads(&mut grads_raw);
        drop(tape);
        let norm = clip_global_norm(&mut grads, cfg.clip_norm);
        if !norm.is_finite() {
            let mut map = values;
            map.insert("grad_norm".into(), norm);
            return Ok(TrainOutcome {
                checkpoint: ck,
                log,
                stop: StopReason::Diverged(map),
            });
        }
        adam.lr = cfg.learning_rate_at(step);
        adam.step(&mut ck.params, &grads);
        ck.step += 1;

        let v = |k: &str| values[k];
        log.records.push(TrainRecord {
            step,
            total: v(LOSS_COMPONENTS[0]),
            mae_t: v("mae_t"),
            mse_t: v("mse_t"),
            mae_r: v("mae_r"),
            mse_r: v("mse_r"),
            mse_img: v("mse_img"),
            kl: v("kl"),
            grad_norm: norm,
            seconds: if cfg.deterministic {
                0.0
            } else {
                start.elapsed().as_secs_f64()
            },
        });
        totals.push(v("total"));

        if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
            on_checkpoint(&ck)?;
        }
        if converged(&totals, cfg.patience, cfg.threshold) {
            return Ok(TrainOutcome {
                checkpoint: ck,
                log,
                stop: StopReason::Converged,
            });
        }
    }
    Ok(TrainOutcome {
        checkpoint: ck,
        log,
        stop: StopReason::Budget,
    })
}
