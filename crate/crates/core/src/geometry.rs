//! Pen-tip pose: a translation in the unit workspace cube plus a unit
//! quaternion. Quaternions are scalar-first `(w, x, y, z)` and canonicalized to
//! `w ≥ 0` so every rotation has one regression target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pen counts as touching the paper below this height (workspace units).
pub const CONTACT_THRESHOLD: f64 = 0.02;

/// Number of scalars in the flat pose encoding `(tx, ty, tz, w, x, y, z)`.
pub const POSE_DIM: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 || angle == 0.0 {
            return Quat::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Quat::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Rotation vector (axis scaled by angle) to quaternion.
    pub fn from_rotation_vector(v: [f64; 3]) -> Self {
        let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        Quat::from_axis_angle(v, angle)
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ o`.
    pub fn mul(self, o: Quat) -> Quat {
        Quat::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    /// Rotates a 3-vector by this (unit) quaternion.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let p = Quat::new(0.0, v[0], v[1], v[2]);
        let r = self.mul(p).mul(self.conjugate());
        [r.x, r.y, r.z]
    }

    pub fn is_finite(self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Unit-normalizes `q` and flips its global sign so that `w ≥ 0`.
pub fn quat_normalize(q: [f64; 4]) -> Result<Quat> {
    let q = Quat::from_array(q);
    let n = q.norm();
    if !(n > 1e-9) {
        return Err(Error::DegenerateRotation(n));
    }
    let s = if q.w < 0.0 { -1.0 / n } else { 1.0 / n };
    Ok(Quat::new(q.w * s, q.x * s, q.y * s, q.z * s))
}

/// Geodesic angle between two rotations, in `[0, π]`; `q` and `−q` are the
/// same rotation.
///
/// Equal to `2·acos(|⟨q1, q2⟩|)`, evaluated as `4·atan2(|q1 − q2|, |q1 + q2|)`
/// after aligning signs: exact zero for identical inputs and no loss of
/// precision near zero where `acos` is ill-conditioned.
pub fn quat_angular_distance(q1: Quat, q2: Quat) -> f64 {
    let q2 = if q1.dot(q2) < 0.0 { q2.neg() } else { q2 };
    let diff = Quat::new(q1.w - q2.w, q1.x - q2.x, q1.y - q2.y, q1.z - q2.z).norm();
    let sum = Quat::new(q1.w + q2.w, q1.x + q2.x, q1.y + q2.y, q1.z + q2.z).norm();
    (4.0 * diff.atan2(sum)).min(std::f64::consts::PI)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseState {
    pub translation: [f64; 3],
    pub rotation: Quat,
    pub pen_down: bool,
}

impl PoseState {
    /// Builds a pose with `pen_down` derived from the height.
    pub fn new(translation: [f64; 3], rotation: Quat) -> Self {
        PoseState {
            translation,
            rotation,
            pen_down: translation[2] < CONTACT_THRESHOLD,
        }
    }

    /// Parses the flat `(tx, ty, tz, w, x, y, z)` encoding, normalizing the
    /// quaternion.
    pub fn from_vec7(v: &[f64]) -> Result<Self> {
        if v.len() != POSE_DIM {
            return Err(Error::Shape {
                op: "pose",
                lhs: vec![v.len()],
                rhs: vec![POSE_DIM],
            });
        }
        let q = quat_normalize([v[3], v[4], v[5], v[6]])?;
        Ok(PoseState::new([v[0], v[1], v[2]], q))
    }

    pub fn to_vec7(&self) -> [f64; POSE_DIM] {
        let t = self.translation;
        let q = self.rotation;
        [t[0], t[1], t[2], q.w, q.x, q.y, q.z]
    }

    pub fn is_valid(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
            && (self.rotation.norm() - 1.0).abs() <= 1e-6
            && self.rotation.w >= 0.0
    }

    pub fn translation_distance(&self, other: &PoseState) -> f64 {
        let d: f64 = (0..3)
            .map(|i| (self.translation[i] - other.translation[i]).powi(2))
            .sum();
        d.sqrt()
    }

    /// Unit pen axis in world coordinates (body +z rotated).
    pub fn pen_axis(&self) -> [f64; 3] {
        self.rotation.rotate([0.0, 0.0, 1.0])
    }
}

/// Poses sampled at a uniform timestep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseTrajectory {
    pub poses: Vec<PoseState>,
}

impl PoseTrajectory {
    pub fn new(poses: Vec<PoseState>) -> Self {
        PoseTrajectory { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn translations(&self) -> Vec<[f64; 3]> {
        self.poses.iter().map(|p| p.translation).collect()
    }
}

/// Flips quaternion signs so consecutive rotations lie in the same
/// hemisphere (`dot(qᵢ, qᵢ₊₁) ≥ 0`). Each output rotation is `±` its input.
pub fn hemisphere_align(traj: &PoseTrajectory) -> PoseTrajectory {
    let mut out = traj.clone();
    for i in 1..out.poses.len() {
        let prev = out.poses[i - 1].rotation;
        let cur = out.poses[i].rotation;
        if prev.dot(cur) < 0.0 {
            out.poses[i].rotation = cur.neg();
        }
    }
    out
}
