//! Training-time augmentation: Gaussian pose noise and camera jitter
//! (integer shift, brightness, saturation, hue).

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_normalize, PoseState, Quat};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Standard deviation of additive translation noise.
    pub sigma_translation: f64,
    /// Standard deviation (radians) of the random rotation angle.
    pub sigma_rotation: f64,
    /// Maximum integer shift in pixels along each axis.
    pub shift_max: usize,
    /// Half-width of the additive brightness interval.
    pub brightness: f64,
    /// Saturation is scaled by a factor in `1 ± saturation`.
    pub saturation: f64,
    /// Half-width of the hue offset interval, in turns.
    pub hue: f64,
    pub pose_noise: bool,
    pub shift: bool,
    pub color_jitter: bool,
    /// Also perturb the regression target pose.
    pub noisy_targets: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            sigma_translation: 0.005,
            sigma_rotation: 0.02,
            shift_max: 4,
            brightness: 0.1,
            saturation: 0.2,
            hue: 0.05,
            pose_noise: true,
            shift: true,
            color_jitter: true,
            noisy_targets: false,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation switched off.
    pub fn disabled() -> Self {
        AugmentConfig {
            pose_noise: false,
            shift: false,
            color_jitter: false,
            ..AugmentConfig::default()
        }
    }

    pub fn image_enabled(&self) -> bool {
        self.shift || self.color_jitter
    }

    pub fn validate(&self, image_height: usize, image_width: usize) -> Result<()> {
        let mags = [
            self.sigma_translation,
            self.sigma_rotation,
            self.brightness,
            self.saturation,
            self.hue,
        ];
        if mags.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::config("augmentation magnitudes must be finite and nonnegative"));
        }
        if self.saturation > 1.0 {
            return Err(Error::config("augment.saturation must not exceed 1"));
        }
        if self.shift && 4 * self.shift_max >= image_height.min(image_width) {
            return Err(Error::config(format!(
                "augment.shift_max = {} must be below a quarter of the image extent",
                self.shift_max
            )));
        }
        Ok(())
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Adds Gaussian translation noise and composes a random small rotation;
/// the contact flag follows the perturbed height.
pub fn augment_pose(pose: &PoseState, cfg: &AugmentConfig, rng: &mut Rng) -> PoseState {
    if !cfg.pose_noise {
        return *pose;
    }
    let mut t = pose.translation;
    if cfg.sigma_translation > 0.0 {
        for v in &mut t {
            *v += cfg.sigma_translation * normal(rng);
        }
    }
    let mut rotation = pose.rotation;
    if cfg.sigma_rotation > 0.0 {
        let angle = (cfg.sigma_rotation * normal(rng)).abs();
        let axis = [normal(rng), normal(rng), normal(rng)];
        let delta = Quat::from_axis_angle(axis, angle);
        rotation = quat_normalize(delta.mul(rotation).to_array()).unwrap_or(rotation);
    }
    PoseState::new(t, rotation)
}

/// One draw of image jitter, applied identically to every image of a pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageJitter {
    pub dx: i64,
    pub dy: i64,
    pub brightness: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl ImageJitter {
    pub const IDENTITY: ImageJitter = ImageJitter {
        dx: 0,
        dy: 0,
        brightness: 0.0,
        saturation: 1.0,
        hue: 0.0,
    };

    pub fn draw(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let mut j = ImageJitter::IDENTITY;
        if cfg.shift && cfg.shift_max > 0 {
            let m = cfg.shift_max as i64;
            j.dx = rng.random_range(-m..=m);
            j.dy = rng.random_range(-m..=m);
        }
        if cfg.color_jitter {
            let mut sym = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
            j.brightness = sym(cfg.brightness);
            j.saturation = 1.0 + sym(cfg.saturation);
            j.hue = sym(cfg.hue);
        }
        j
    }

    /// Applies the jitter to a `[3 × H × W]` image.
    pub fn apply(&self, img: &Tensor) -> Tensor {
        let &[c, h, w] = img.shape() else {
            panic!("ImageJitter::apply expects a [C, H, W] image");
        };
        let plane = h * w;
        let src = img.data();
        let mut out = vec![0.0; src.len()];
        for ch in 0..c {
            for row in 0..h as i64 {
                let sr = row - self.dy;
                if sr < 0 || sr >= h as i64 {
                    continue;
                }
                for col in 0..w as i64 {
                    let sc = col - self.dx;
                    if sc < 0 || sc >= w as i64 {
                        continue;
                    }
                    out[ch * plane + (row as usize) * w + col as usize] =
                        src[ch * plane + (sr as usize) * w + sc as usize];
                }
            }
        }
        if self.brightness != 0.0 {
            for v in &mut out {
                *v = (*v + self.brightness).clamp(0.0, 1.0);
            }
        }
        if c == 3 && (self.saturation != 1.0 || self.hue != 0.0) {
            for i in 0..plane {
                let (hh, s, v) = rgb_to_hsv(out[i], out[plane + i], out[2 * plane + i]);
                let (r, g, b) = hsv_to_rgb(
                    (hh + self.hue).rem_euclid(1.0),
                    (s * self.saturation).clamp(0.0, 1.0),
                    v,
                );
                out[i] = r.clamp(0.0, 1.0);
                out[plane + i] = g.clamp(0.0, 1.0);
                out[2 * plane + i] = b.clamp(0.0, 1.0);
            }
        }
        Tensor::new(img.shape().to_vec(), out).expect("same shape")
    }
}

pub fn augment_image(img: &Tensor, cfg: &AugmentConfig, rng: &mut Rng) -> Tensor {
    ImageJitter::draw(cfg, rng).apply(img)
}

/// Hue in turns `[0, 1)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn image(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = stream(seed, "test");
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let cfg = AugmentConfig {
            sigma_translation: 0.0,
            sigma_rotation: 0.0,
            shift_max: 0,
            brightness: 0.0,
            saturation: 0.0,
            hue: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = stream(1, "augment");
        let pose = PoseState::new([0.3, 0.4, 0.05], Quat::from_axis_angle([1.0, 2.0, 0.5], 0.3));
        assert_eq!(augment_pose(&pose, &cfg, &mut rng), pose);
        let img = image(2, 12, 12);
        let out = augment_image(&img, &cfg, &mut rng);
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_noise_is_unbiased() {
        let cfg = AugmentConfig::default();
        let mut rng = stream(3, "augment");
        let pose = PoseState::new([0.5, 0.5, 0.5], Quat::IDENTITY);
        let n = 100_000;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let p = augment_pose(&pose, &cfg, &mut rng);
            for k in 0..3 {
                sums[k] += p.translation[k] - 0.5;
            }
        }
        let bound = 4.0 * cfg.sigma_translation / (n as f64).sqrt();
        for s in sums {
            assert!((s / n as f64).abs() < bound, "mean {} exceeds {bound}", s / n as f64);
        }
    }

    #[test]
    fn pen_flag_follows_perturbed_height() {
        let cfg = AugmentConfig {
            sigma_translation: 0.05,
            ..AugmentConfig::default()
        };
        let mut rng = stream(4, "augment");
        let pose = PoseState::new([0.5, 0.5, 0.02], Quat::IDENTITY);
        for _ in 0..200 {
            let p = augment_pose(&pose, &cfg, &mut rng);
            assert_eq!(p.pen_down, p.translation[2] < crate::geometry::CONTACT_THRESHOLD);
        }
    }

    #[test]
    fn shift_then_unshift_keeps_interior() {
        let (h, w, k, l) = (16usize, 14usize, 2i64, 3i64);
        let img = image(5, h, w);
        let fwd = ImageJitter { dx: l, dy: k, ..ImageJitter::IDENTITY };
        let back = ImageJitter { dx: -l, dy: -k, ..ImageJitter::IDENTITY };
        let round = back.apply(&fwd.apply(&img));
        let plane = h * w;
        for ch in 0..3 {
            for r in 0..h {
                for c in 0..w {
                    let i = ch * plane + r * w + c;
                    let interior = r < h - k as usize && c < w - l as usize;
                    if interior {
                        assert_eq!(round.data()[i], img.data()[i]);
                    } else {
                        assert_eq!(round.data()[i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn pair_draw_is_shared_and_reproducible() {
        let cfg = AugmentConfig::default();
        let a = ImageJitter::draw(&cfg, &mut stream(9, "augment"));
        let b = ImageJitter::draw(&cfg, &mut stream(9, "augment"));
        assert_eq!(a, b);
        let img = image(6, 16, 16);
        assert_eq!(a.apply(&img), b.apply(&img));
    }

    #[test]
    fn validation_rejects_large_shift() {
        let cfg = AugmentConfig {
            shift_max: 4,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate(64, 64).is_ok());
        assert!(cfg.validate(16, 16).is_err());
        let neg = AugmentConfig {
            hue: -0.1,
            ..AugmentConfig::default()
        };
        assert!(neg.validate(64, 64).is_err());
    }

    proptest! {
        #[test]
        fn grayscale_is_fixed_under_color_jitter(v in 0.0f64..1.0, sat in 0.5f64..1.5, hue in -0.5f64..0.5) {
            let img = Tensor::full(&[3, 2, 2], v);
            let j = ImageJitter { saturation: sat, hue, ..ImageJitter::IDENTITY };
            for x in j.apply(&img).data() {
                prop_assert!((x - v).abs() < 1e-6);
            }
        }

        #[test]
        fn hsv_round_trip(r in 0.0f64..1.0, g in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            prop_assert!((r - r2).abs() < 1e-9 && (g - g2).abs() < 1e-9 && (b - b2).abs() < 1e-9);
        }

        #[test]
        fn outputs_stay_in_range(seed in 0u64..1000) {
            let cfg = AugmentConfig::default();
            let mut rng = stream(seed, "augment");
            let img = image(seed, 20, 20);
            let out = augment_image(&img, &cfg, &mut rng);
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let pose = PoseState::new([0.5, 0.5, 0.05], Quat::from_axis_angle([0.0, 1.0, 0.0], 0.4));
            let p = augment_pose(&pose, &cfg, &mut rng);
            prop_assert!((p.rotation.norm() - 1.0).abs() < 1e-6);
            prop_assert!(p.rotation.w >= 0.0);
        }
    }
}
