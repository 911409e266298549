//! The learned planner: a residual feature-pyramid image encoder and a pose
//! MLP feed a diagonal-Gaussian bottleneck; a (bi-)LSTM over a window of
//! recent latents predicts the next latent, which is decoded into the next
//! camera frame and the next pen pose.

mod checkpoint;
mod params;

pub use checkpoint::{PolicyCheckpoint, CHECKPOINT_SCHEMA_VERSION};
pub use params::{init_parameters, Bound, ParamStore};

use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseState, POSE_DIM};
use crate::rng::Rng;
use crate::sim::CHANNELS;
use crate::tensor::{Tape, Tensor, Var};

/// Bounds applied to the encoder's log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 4.0;

/// Names of the loss components, in logging order.
pub const LOSS_COMPONENTS: [&str; 7] = ["total", "mae_t", "mse_t", "mae_r", "mse_r", "mse_img", "kl"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Latent dimension J.
    pub latent_dim: usize,
    /// Output channels of the residual encoder stages; each stage halves
    /// the spatial extent.
    pub stage_channels: Vec<usize>,
    /// Channels of the top-down pyramid.
    pub merge_channels: usize,
    /// How many of the deepest stages feed the pyramid.
    pub pyramid_levels: usize,
    /// Each pyramid level is average-pooled to at most this many cells per side.
    pub pool_size: usize,
    pub lstm_hidden: usize,
    /// Number of latents the predictor sees.
    pub window: usize,
    pub pose_mlp: Vec<usize>,
    /// Channels of the image decoder, coarsest first; one 2× upsampling per entry.
    pub decoder_channels: Vec<usize>,
    pub pose_decoder: Vec<usize>,
    /// λ₁…λ₆: MAE(t), MSE(t), MAE(R), MSE(R), MSE(image), KL.
    pub lambda: [f64; 6],
    /// Monte-Carlo samples of z per training step.
    pub mc_samples: usize,
    pub bidirectional: bool,
    pub variational: bool,
    pub use_fpn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            latent_dim: 32,
            stage_channels: vec![16, 32, 64, 64],
            merge_channels: 32,
            pyramid_levels: 3,
            pool_size: 2,
            lstm_hidden: 64,
            window: 8,
            pose_mlp: vec![64, 64],
            decoder_channels: vec![32, 16, 8],
            pose_decoder: vec![64, 64],
            lambda: [1.0, 1.0, 1.0, 1.0, 1.0, 1e-3],
            mc_samples: 1,
            bidirectional: true,
            variational: true,
            use_fpn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.latent_dim == 0 || self.window == 0 || self.mc_samples == 0 {
            return fail("latent_dim, window and mc_samples must be at least 1".into());
        }
        if self.lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return fail(format!("loss weights must be finite and nonnegative, got {:?}", self.lambda));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return fail("stage_channels must be a nonempty list of positive counts".into());
        }
        if self.pyramid_levels == 0 || self.pyramid_levels > self.stage_channels.len() {
            return fail(format!(
                "pyramid_levels = {} must lie in 1..={}",
                self.pyramid_levels,
                self.stage_channels.len()
            ));
        }
        if self.merge_channels == 0 || self.pool_size == 0 || self.lstm_hidden == 0 {
            return fail("merge_channels, pool_size and lstm_hidden must be positive".into());
        }
        if self.pose_mlp.contains(&0) || self.pose_decoder.contains(&0) || self.decoder_channels.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if self.decoder_channels.is_empty() {
            return fail("decoder_channels must not be empty".into());
        }
        let enc = 1usize << self.stage_channels.len();
        let dec = 1usize << self.decoder_channels.len();
        for extent in [self.image_height, self.image_width] {
            if extent % enc != 0 || extent % dec != 0 {
                return fail(format!(
                    "image extent {extent} must be divisible by {} (encoder) and {} (decoder)",
                    enc, dec
                ));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [CHANNELS, self.image_height, self.image_width]
    }

    /// Spatial extent after encoder stage `s`.
    fn stage_extent(&self, s: usize) -> (usize, usize) {
        (self.image_height >> (s + 1), self.image_width >> (s + 1))
    }

    fn pyramid_stages(&self) -> std::ops::Range<usize> {
        let n = self.stage_channels.len();
        if self.use_fpn {
            n - self.pyramid_levels..n
        } else {
            n - 1..n
        }
    }

    fn pooled(&self, s: usize) -> (usize, usize) {
        let (h, w) = self.stage_extent(s);
        (h.min(self.pool_size), w.min(self.pool_size))
    }

    /// Width of the pooled image feature vector.
    pub fn image_feature_dim(&self) -> usize {
        self.pyramid_stages()
            .map(|s| {
                let (ph, pw) = self.pooled(s);
                let ch = if self.use_fpn {
                    self.merge_channels
                } else {
                    self.stage_channels[s]
                };
                ch * ph * pw
            })
            .sum()
    }

    fn pose_embed_dim(&self) -> usize {
        self.pose_mlp.last().copied().unwrap_or(POSE_DIM)
    }

    fn seed_extent(&self) -> (usize, usize) {
        let k = self.decoder_channels.len();
        (self.image_height >> k, self.image_width >> k)
    }
}

/// Encoder output for a batch of observations.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    /// `[N × J]`.
    pub mu: Var,
    /// `[N × J]`, clamped; `None` for the deterministic bottleneck.
    pub log_sigma: Option<Var>,
}

/// Decoder output for a batch.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    /// `[B × 3 × H × W]` in `(0, 1)`.
    pub image: Var,
    /// `[B × 3]`.
    pub translation: Var,
    /// `[B × 4]`, unit norm with `w ≥ 0`.
    pub rotation: Var,
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.matmul(x, p.get(&format!("{name}.w"))?)?;
    tape.add_row_bias(y, p.get(&format!("{name}.b"))?)
}

fn conv(tape: &mut Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let y = tape.conv2d(x, p.get(&format!("{name}.w"))?, stride, pad)?;
    tape.add_channel_bias(y, p.get(&format!("{name}.b"))?)
}

fn mlp(tape: &mut Tape, p: &Bound, prefix: &str, layers: usize, mut x: Var) -> Result<Var> {
    for i in 0..layers {
        x = linear(tape, p, &format!("{prefix}.{i}"), x)?;
        x = tape.relu(x);
    }
    Ok(x)
}

fn flatten(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let cols = s[1..].iter().product();
    tape.reshape(x, &[s[0], cols])
}

/// Maps observations (`images [N×3×H×W]`, `poses [N×7]`) to the posterior
/// parameters.
pub fn encode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, images: Var, poses: Var) -> Result<LatentVars> {
    let s = tape.shape(images).to_vec();
    let expected = cfg.image_shape();
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::config(format!(
            "observation images have shape {s:?}, model expects [N, {}, {}, {}]",
            expected[0], expected[1], expected[2]
        )));
    }
    let ps = tape.shape(poses).to_vec();
    if ps != [s[0], POSE_DIM] {
        return Err(Error::config(format!("pose batch has shape {ps:?}, expected [{}, 7]", s[0])));
    }

    let mut stages = Vec::with_capacity(cfg.stage_channels.len());
    let mut x = images;
    for i in 0..cfg.stage_channels.len() {
        let main = conv(tape, p, &format!("enc.stage{i}.down"), x, 2, 1)?;
        let main = tape.relu(main);
        let main = conv(tape, p, &format!("enc.stage{i}.conv"), main, 1, 1)?;
        let skip = conv(tape, p, &format!("enc.stage{i}.skip"), x, 2, 0)?;
        let sum = tape.add(main, skip)?;
        x = tape.relu(sum);
        stages.push(x);
    }

    let levels: Vec<usize> = cfg.pyramid_stages().collect();
    let mut merged: Vec<(usize, Var)> = Vec::with_capacity(levels.len());
    if cfg.use_fpn {
        let mut above: Option<Var> = None;
        for &lvl in levels.iter().rev() {
            let lat = conv(tape, p, &format!("fpn.lateral{lvl}"), stages[lvl], 1, 0)?;
            let m = match above {
                Some(up) => {
                    let up = tape.upsample2x(up)?;
                    tape.add(lat, up)?
                }
                None => lat,
            };
            merged.push((lvl, m));
            above = Some(m);
        }
        merged.reverse();
    } else {
        merged.extend(levels.iter().map(|&l| (l, stages[l])));
    }

    let mut feats = Vec::with_capacity(merged.len() + 1);
    for (lvl, m) in merged {
        let (h, _) = cfg.stage_extent(lvl);
        let (ph, _) = cfg.pooled(lvl);
        let pooled = if h == ph { m } else { tape.avg_pool(m, h / ph)? };
        feats.push(flatten(tape, pooled)?);
    }
    feats.push(mlp(tape, p, "pose_enc", cfg.pose_mlp.len(), poses)?);
    let joint = tape.concat_cols(&feats)?;

    let mu = linear(tape, p, "head.mu", joint)?;
    let log_sigma = if cfg.variational {
        let raw = linear(tape, p, "head.log_sigma", joint)?;
        Some(tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX))
    } else {
        None
    };
    Ok(LatentVars { mu, log_sigma })
}

/// Standard-normal noise of the latent shape.
pub fn sample_eps(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("eps shape")
}

/// `z = μ + exp(log σ) ⊙ ε`; `eps` enters as a constant.
pub fn reparameterize(tape: &mut Tape, latent: &LatentVars, eps: &Tensor) -> Result<Var> {
    let Some(log_sigma) = latent.log_sigma else {
        return Ok(latent.mu);
    };
    let e = tape.constant(eps.clone());
    let sigma = tape.exp(log_sigma);
    let noise = tape.mul(sigma, e)?;
    tape.add(latent.mu, noise)
}

fn lstm_direction(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, prefix: &str, seq: &[Var]) -> Result<Var> {
    let rows = tape.shape(seq[0])[0];
    let hd = cfg.lstm_hidden;
    let wx = p.get(&format!("{prefix}.wx"))?;
    let wh = p.get(&format!("{prefix}.wh"))?;
    let b = p.get(&format!("{prefix}.b"))?;
    let mut h = tape.constant(Tensor::zeros(&[rows, hd]));
    let mut c = tape.constant(Tensor::zeros(&[rows, hd]));
    for &x in seq {
        let gx = tape.matmul(x, wx)?;
        let gh = tape.matmul(h, wh)?;
        let g = tape.add(gx, gh)?;
        let g = tape.add_row_bias(g, b)?;
        let gi = tape.slice_cols(g, 0, hd)?;
        let gf = tape.slice_cols(g, hd, 2 * hd)?;
        let gg = tape.slice_cols(g, 2 * hd, 3 * hd)?;
        let go = tape.slice_cols(g, 3 * hd, 4 * hd)?;
        let i = tape.sigmoid(gi);
        let f = tape.sigmoid(gf);
        let gg = tape.tanh(gg);
        let o = tape.sigmoid(go);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, gg)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
    }
    Ok(h)
}

/// Final hidden states of the recurrent predictor: `[B × H]` forward, and
/// `[B × H]` backward when bidirectional.
pub fn recurrent_states(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, window: &[Var]) -> Result<(Var, Option<Var>)> {
    if window.len() != cfg.window {
        return Err(Error::config(format!(
            "latent window has {} entries, model expects {}",
            window.len(),
            cfg.window
        )));
    }
    let hf = lstm_direction(tape, p, cfg, "lstm.fwd", window)?;
    if !cfg.bidirectional {
        return Ok((hf, None));
    }
    let rev: Vec<Var> = window.iter().rev().copied().collect();
    let hb = lstm_direction(tape, p, cfg, "lstm.bwd", &rev)?;
    Ok((hf, Some(hb)))
}

/// Predicts the next latent from a window of `[B × J]` latents, oldest first.
pub fn predict_latent(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, window: &[Var]) -> Result<Var> {
    let (hf, hb) = recurrent_states(tape, p, cfg, window)?;
    let h = match hb {
        Some(hb) => tape.concat_cols(&[hf, hb])?,
        None => hf,
    };
    linear(tape, p, "lstm.out", h)
}

pub fn decode(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, z: Var) -> Result<PredictionVars> {
    let rows = tape.shape(z)[0];
    let (sh, sw) = cfg.seed_extent();
    let seed = linear(tape, p, "dec.seed", z)?;
    let seed = tape.relu(seed);
    let mut x = tape.reshape(seed, &[rows, cfg.decoder_channels[0], sh, sw])?;
    let k = cfg.decoder_channels.len();
    for i in 0..k {
        x = tape.upsample2x(x)?;
        x = conv(tape, p, &format!("dec.up{i}"), x, 1, 1)?;
        x = if i + 1 < k { tape.relu(x) } else { tape.sigmoid(x) };
    }
    let hidden = mlp(tape, p, "pose_dec", cfg.pose_decoder.len(), z)?;
    let raw = linear(tape, p, "pose_dec.out", hidden)?;
    let translation = tape.slice_cols(raw, 0, 3)?;
    let q = tape.slice_cols(raw, 3, 7)?;
    let rotation = tape.quat_normalize(q)?;
    Ok(PredictionVars {
        image: x,
        translation,
        rotation,
    })
}

/// `−½ Σⱼ (1 + 2 log σⱼ − μⱼ² − σⱼ²)`, summed over latent dimensions and
/// averaged over rows.
pub fn kl_divergence(tape: &mut Tape, mu: Var, log_sigma: Var) -> Result<Var> {
    let rows = tape.shape(mu)[0] as f64;
    let two_ls = tape.scale(log_sigma, 2.0);
    let var = tape.exp(two_ls);
    let mu2 = tape.square(mu);
    let a = tape.add_scalar(two_ls, 1.0);
    let a = tape.sub(a, mu2)?;
    let a = tape.sub(a, var)?;
    let s = tape.sum(a);
    Ok(tape.scale(s, -0.5 / rows))
}

/// Scalar loss and its named components (all as tape nodes).
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub components: BTreeMap<&'static str, Var>,
}

impl LossVars {
    /// Component values; a NaN anywhere is reported as divergence.
    pub fn values(&self, tape: &Tape) -> Result<BTreeMap<String, f64>> {
        let map: BTreeMap<String, f64> = self
            .components
            .iter()
            .map(|(k, v)| (k.to_string(), tape.value(*v).item()))
            .collect();
        if map.values().any(|v| v.is_nan()) {
            return Err(Error::Divergence(map));
        }
        Ok(map)
    }
}

fn mae_mse(tape: &mut Tape, a: Var, b: Var) -> Result<(Var, Var)> {
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d);
    let sq = tape.square(d);
    Ok((tape.mean(ad), tape.mean(sq)))
}

/// Reconstruction terms (λ₁…λ₅) against the next observation.
pub fn reconstruction_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pred: &PredictionVars,
    target_image: Var,
    target_pose: Var,
) -> Result<LossVars> {
    let tt = tape.slice_cols(target_pose, 0, 3)?;
    let tr = tape.slice_cols(target_pose, 3, 7)?;
    let (mae_t, mse_t) = mae_mse(tape, pred.translation, tt)?;
    let (mae_r, mse_r) = mae_mse(tape, pred.rotation, tr)?;
    let di = tape.sub(pred.image, target_image)?;
    let di = tape.square(di);
    let mse_img = tape.mean(di);
    let l = cfg.lambda;
    let terms = [mae_t, mse_t, mae_r, mse_r, mse_img];
    let mut total = tape.scale(terms[0], l[0]);
    for (term, w) in terms.iter().zip(l).skip(1) {
        let t = tape.scale(*term, w);
        total = tape.add(total, t)?;
    }
    let components = BTreeMap::from([
        ("total", total),
        ("mae_t", mae_t),
        ("mse_t", mse_t),
        ("mae_r", mae_r),
        ("mse_r", mse_r),
        ("mse_img", mse_img),
    ]);
    Ok(LossVars { total, components })
}

/// Full objective: λ-weighted reconstruction plus λ₆·KL. The target
/// quaternion must already be canonical (`w ≥ 0`).
pub fn loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    pred: &PredictionVars,
    target_image: Var,
    target_pose: Var,
    latent: &LatentVars,
) -> Result<LossVars> {
    let mut out = reconstruction_loss(tape, cfg, pred, target_image, target_pose)?;
    attach_kl(tape, cfg, &mut out, latent)?;
    Ok(out)
}

fn attach_kl(tape: &mut Tape, cfg: &ModelConfig, out: &mut LossVars, latent: &LatentVars) -> Result<()> {
    let kl = match latent.log_sigma {
        Some(ls) => kl_divergence(tape, latent.mu, ls)?,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    if latent.log_sigma.is_some() {
        let w = tape.scale(kl, cfg.lambda[5]);
        out.total = tape.add(out.total, w)?;
    }
    out.components.insert("kl", kl);
    out.components.insert("total", out.total);
    Ok(())
}

/// A training batch. Each item's window refers to rows of the encoded
/// observation block, so shared or padded entries are encoded once.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[N × 3 × H × W]`.
    pub images: Tensor,
    /// `[N × 7]`.
    pub poses: Tensor,
    /// `window[k][b]`: row holding item `b`'s `k`-th context observation.
    pub window: Vec<Vec<usize>>,
    /// `[B × 3 × H × W]`.
    pub target_images: Tensor,
    /// `[B × 7]`.
    pub target_poses: Tensor,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.target_poses.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles produced by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub images: Var,
    pub latent: LatentVars,
    pub predictions: Vec<PredictionVars>,
    pub loss: LossVars,
}

/// encode → reparameterize → predict_latent → decode → loss for a batch.
/// `eps` holds one `[N × J]` noise draw per Monte-Carlo sample; the
/// reconstruction terms are averaged over samples.
pub fn forward(tape: &mut Tape, p: &Bound, cfg: &ModelConfig, batch: &Batch, eps: &[Tensor]) -> Result<ForwardVars> {
    let images = tape.constant(batch.images.clone());
    forward_from(tape, p, cfg, batch, eps, images)
}

/// As [`forward`], with the observation images supplied as a tape node.
pub fn forward_from(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &Batch,
    eps: &[Tensor],
    images: Var,
) -> Result<ForwardVars> {
    if batch.window.len() != cfg.window {
        return Err(Error::config(format!(
            "batch window length {} differs from model window {}",
            batch.window.len(),
            cfg.window
        )));
    }
    let samples = if cfg.variational { cfg.mc_samples } else { 1 };
    if eps.len() < samples {
        return Err(Error::Usage(format!("need {samples} noise draws, got {}", eps.len())));
    }
    let poses = tape.constant(batch.poses.clone());
    let target_image = tape.constant(batch.target_images.clone());
    let target_pose = tape.constant(batch.target_poses.clone());
    let latent = encode(tape, p, cfg, images, poses)?;

    let mut predictions = Vec::with_capacity(samples);
    let mut recon: Option<LossVars> = None;
    for e in &eps[..samples] {
        let z = reparameterize(tape, &latent, e)?;
        let mut window = Vec::with_capacity(cfg.window);
        for rows in &batch.window {
            window.push(tape.gather_rows(z, rows)?);
        }
        let z_next = predict_latent(tape, p, cfg, &window)?;
        let pred = decode(tape, p, cfg, z_next)?;
        let l = reconstruction_loss(tape, cfg, &pred, target_image, target_pose)?;
        predictions.push(pred);
        recon = Some(match recon {
            None => l,
            Some(mut acc) => {
                for (k, v) in l.components {
                    let sum = tape.add(acc.components[k], v)?;
                    acc.components.insert(k, sum);
                }
                acc.total = acc.components["total"];
                acc
            }
        });
    }
    let mut out = recon.expect("at least one sample");
    if samples > 1 {
        let inv = 1.0 / samples as f64;
        for v in out.components.values_mut() {
            *v = tape.scale(*v, inv);
        }
        out.total = out.components["total"];
    }
    attach_kl(tape, cfg, &mut out, &latent)?;
    Ok(ForwardVars {
        images,
        latent,
        predictions,
        loss: out,
    })
}

/// Concrete next-state prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image: Tensor,
    pub pose: PoseState,
}

/// Inference-time wrapper: posterior means, no sampling.
#[derive(Clone, Debug)]
pub struct Policy {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Policy {
    pub fn new(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.check_against(&init_parameters(&config, 0)?)?;
        Ok(Policy { config, params })
    }

    /// Posterior means `[N × J]` for a batch of observations.
    pub fn encode_mean(&self, images: &Tensor, poses: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let im = tape.constant(images.clone());
        let ps = tape.constant(poses.clone());
        let lat = encode(&mut tape, &p, &self.config, im, ps)?;
        Ok(tape.value(lat.mu).clone())
    }

    /// Predicts the next state from `window` latents (each `[B × J]`).
    pub fn predict(&self, window: &[Tensor]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let p = self.params.bind_constant(&mut tape);
        let vars: Vec<Var> = window.iter().map(|w| tape.constant(w.clone())).collect();
        let z = predict_latent(&mut tape, &p, &self.config, &vars)?;
        let pred = decode(&mut tape, &p, &self.config, z)?;
        let img = tape.value(pred.image);
        let t = tape.value(pred.translation);
        let r = tape.value(pred.rotation);
        let rows = t.shape()[0];
        let plane = img.numel() / rows;
        let mut out = Vec::with_capacity(rows);
        for b in 0..rows {
            let mut v = [0.0; POSE_DIM];
            v[..3].copy_from_slice(t.row(b));
            v[3..].copy_from_slice(r.row(b));
            let rotation = crate::geometry::Quat::from_array([v[3], v[4], v[5], v[6]]);
            out.push(Prediction {
                image: Tensor::new(img.shape()[1..].to_vec(), img.data()[b * plane..(b + 1) * plane].to_vec())?,
                pose: PoseState::new([v[0], v[1], v[2]], rotation),
            });
        }
        Ok(out)
    }
}

/// Finite-difference audit of [`forward`]. For every parameter tensor and
/// for the observation images, the analytic derivative along a random
/// direction is compared with a central difference of step `step`; returns
/// the relative error per tensor (images under `"input.images"`).
pub fn directional_grad_check(
    cfg: &ModelConfig,
    params: &ParamStore,
    batch: &Batch,
    eps: &[Tensor],
    step: f64,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    use rand::Rng as _;

    const IMAGES: &str = "input.images";
    let eval = |params: &ParamStore, images: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let p = params.bind_constant(&mut tape);
        let im = tape.constant(images.clone());
        let f = forward_from(&mut tape, &p, cfg, batch, eps, im)?;
        Ok(tape.value(f.loss.total).item())
    };

    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let im = tape.param(batch.images.clone());
    let f = forward_from(&mut tape, &p, cfg, batch, eps, im)?;
    let mut grads = tape.backward(f.loss.total)?;
    let mut analytic = p.collect_grads(&mut grads);
    analytic.insert(IMAGES.to_string(), grads.take(im).expect("images require grad"));

    let mut rng = crate::rng::stream(seed, "gradcheck");
    let mut out = BTreeMap::new();
    for (name, g) in analytic {
        let n = g.len();
        let norm = (n as f64).sqrt();
        let dir: Vec<f64> = (0..n)
            .map(|_| if rng.random::<bool>() { 1.0 / norm } else { -1.0 / norm })
            .collect();
        let a: f64 = g.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let shifted = |sign: f64| -> Result<f64> {
            let mut ps = params.clone();
            let mut images = batch.images.clone();
            let target = if name == IMAGES {
                images.data_mut()
            } else {
                ps.get_mut(&name).expect("known parameter").data_mut()
            };
            target.iter_mut().zip(&dir).for_each(|(v, d)| *v += sign * step * d);
            eval(&ps, &images)
        };
        let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * step);
        out.insert(name, crate::tensor::relative_error(a, numeric));
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests;
