//! The command interface between the high-level and low-level controllers.
//!
//! A [`CommandVector`] carries root velocities in the heading frame, absolute
//! root height/roll/pitch, yaw rate and whole-body joint targets, plus neck and
//! hand targets. Flattened vectors follow the versioned [`CommandLayout`]:
//!
//! ```text
//! [vx, vy, z, roll, pitch, yaw_rate, q_ref..., neck_yaw, neck_pitch, left_hand..., right_hand...]
//! ```

use std::ops::Range;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::CommandError;
use crate::model::{JointConfig, LinkPose, RobotModel};
use crate::retarget::{HandTargets, NeckTarget, RetargetResult};

const ROOT_DIMS: usize = 6;
const NECK_DIMS: usize = 2;

/// Names and order of the flattened command dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandLayout {
    pub version: u32,
    pub body_joints: Vec<String>,
    pub left_hand: Vec<String>,
    pub right_hand: Vec<String>,
}

impl CommandLayout {
    pub const VERSION: u32 = 1;

    pub fn new(body_joints: Vec<String>, left_hand: Vec<String>, right_hand: Vec<String>) -> Self {
        Self {
            version: Self::VERSION,
            body_joints,
            left_hand,
            right_hand,
        }
    }

    pub fn from_model(model: &RobotModel) -> Self {
        let hand_names = |side: &str, cfg: &crate::config::HandSideConfig| -> Vec<String> {
            if cfg.joints.is_empty() {
                (0..cfg.dof()).map(|i| format!("{side}_hand_{i}")).collect()
            } else {
                cfg.joints.clone()
            }
        };
        Self::new(
            model.joint_names(),
            hand_names("left", &model.hands().left),
            hand_names("right", &model.hands().right),
        )
    }

    pub fn body_dof(&self) -> usize {
        self.body_joints.len()
    }

    pub fn dim(&self) -> usize {
        ROOT_DIMS + self.body_joints.len() + NECK_DIMS + self.left_hand.len() + self.right_hand.len()
    }

    /// Number of joint-space entries (body, neck, hands) following the root terms.
    pub fn actuated_dof(&self) -> usize {
        self.dim() - ROOT_DIMS
    }

    pub fn body_range(&self) -> Range<usize> {
        ROOT_DIMS..ROOT_DIMS + self.body_joints.len()
    }

    pub fn neck_range(&self) -> Range<usize> {
        let start = self.body_range().end;
        start..start + NECK_DIMS
    }

    pub fn left_hand_range(&self) -> Range<usize> {
        let start = self.neck_range().end;
        start..start + self.left_hand.len()
    }

    pub fn right_hand_range(&self) -> Range<usize> {
        let start = self.left_hand_range().end;
        start..start + self.right_hand.len()
    }

    pub fn names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["vx", "vy", "z", "roll", "pitch", "yaw_rate"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(self.body_joints.iter().cloned());
        names.push("neck_yaw".into());
        names.push("neck_pitch".into());
        names.extend(self.left_hand.iter().cloned());
        names.extend(self.right_hand.iter().cloned());
        names
    }
}

/// One command sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CommandVector {
    /// Root translational velocity in the heading frame, m/s.
    pub vx: f64,
    pub vy: f64,
    /// Root height, m.
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    /// Root yaw rate, rad/s.
    pub yaw_rate: f64,
    pub q_ref: JointConfig,
    pub neck: NeckTarget,
    pub hands: HandTargets,
    /// Nanoseconds.
    pub timestamp: u64,
}

impl CommandVector {
    /// A zero-velocity command for `layout` with every other entry zero.
    pub fn zeros(layout: &CommandLayout) -> Self {
        Self {
            q_ref: JointConfig::zeros(layout.body_dof()),
            hands: HandTargets {
                left: vec![0.0; layout.left_hand.len()],
                right: vec![0.0; layout.right_hand.len()],
            },
            ..Self::default()
        }
    }

    pub fn flatten(&self, layout: &CommandLayout) -> Result<Vec<f64>, CommandError> {
        let check = |expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(CommandError::Dimension { expected, got })
            }
        };
        check(layout.body_dof(), self.q_ref.len())?;
        check(layout.left_hand.len(), self.hands.left.len())?;
        check(layout.right_hand.len(), self.hands.right.len())?;
        let mut flat = Vec::with_capacity(layout.dim());
        flat.extend_from_slice(&[self.vx, self.vy, self.z, self.roll, self.pitch, self.yaw_rate]);
        flat.extend_from_slice(&self.q_ref);
        flat.push(self.neck.yaw);
        flat.push(self.neck.pitch);
        flat.extend_from_slice(&self.hands.left);
        flat.extend_from_slice(&self.hands.right);
        Ok(flat)
    }

    pub fn unflatten(layout: &CommandLayout, flat: &[f64], timestamp: u64) -> Result<Self, CommandError> {
        if flat.len() != layout.dim() {
            return Err(CommandError::Dimension {
                expected: layout.dim(),
                got: flat.len(),
            });
        }
        let neck = layout.neck_range();
        Ok(Self {
            vx: flat[0],
            vy: flat[1],
            z: flat[2],
            roll: flat[3],
            pitch: flat[4],
            yaw_rate: flat[5],
            q_ref: JointConfig::new(flat[layout.body_range()].to_vec()),
            neck: NeckTarget {
                yaw: flat[neck.start],
                pitch: flat[neck.start + 1],
            },
            hands: HandTargets {
                left: flat[layout.left_hand_range()].to_vec(),
                right: flat[layout.right_hand_range()].to_vec(),
            },
            timestamp,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.vx, self.vy, self.z, self.roll, self.pitch, self.yaw_rate, self.neck.yaw, self.neck.pitch]
            .iter()
            .chain(self.q_ref.iter())
            .chain(self.hands.left.iter())
            .chain(self.hands.right.iter())
            .all(|v| v.is_finite())
    }

    /// This command with all root velocity terms set to zero.
    pub fn holding(&self) -> Self {
        Self {
            vx: 0.0,
            vy: 0.0,
            yaw_rate: 0.0,
            ..self.clone()
        }
    }
}

/// Root orientation/angular velocity plus joint positions/velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProprioState {
    pub root_orientation: UnitQuaternion<f64>,
    /// rad/s.
    pub root_angular_velocity: Vector3<f64>,
    pub q: JointConfig,
    pub dq: Vec<f64>,
    /// Nanoseconds.
    pub timestamp: u64,
}

impl ProprioState {
    pub fn zeros(joints: usize) -> Self {
        Self {
            root_orientation: UnitQuaternion::identity(),
            root_angular_velocity: Vector3::zeros(),
            q: JointConfig::zeros(joints),
            dq: vec![0.0; joints],
            timestamp: 0,
        }
    }

    pub fn flat_dim(joints: usize) -> usize {
        7 + 2 * joints
    }

    /// `[qw, qx, qy, qz, wx, wy, wz, q..., dq...]`.
    pub fn flatten(&self) -> Vec<f64> {
        let quat = self.root_orientation.quaternion();
        let mut flat = Vec::with_capacity(Self::flat_dim(self.q.len()));
        flat.extend_from_slice(&[quat.w, quat.i, quat.j, quat.k]);
        flat.extend(self.root_angular_velocity.iter());
        flat.extend_from_slice(&self.q);
        flat.extend_from_slice(&self.dq);
        flat
    }

    pub fn unflatten(joints: usize, flat: &[f64], timestamp: u64) -> Result<Self, CommandError> {
        if flat.len() != Self::flat_dim(joints) {
            return Err(CommandError::Dimension {
                expected: Self::flat_dim(joints),
                got: flat.len(),
            });
        }
        let quat = nalgebra::Quaternion::new(flat[0], flat[1], flat[2], flat[3]);
        Ok(Self {
            root_orientation: UnitQuaternion::new_unchecked(quat),
            root_angular_velocity: Vector3::new(flat[4], flat[5], flat[6]),
            q: JointConfig::new(flat[7..7 + joints].to_vec()),
            dq: flat[7 + joints..].to_vec(),
            timestamp,
        })
    }
}

/// Per-dimension affine normalization `(x - offset) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormalizationStats {
    pub fn new(offset: Vec<f64>, scale: Vec<f64>) -> Result<Self, CommandError> {
        if offset.len() != scale.len() {
            return Err(CommandError::Dimension {
                expected: offset.len(),
                got: scale.len(),
            });
        }
        if let Some((index, &value)) = scale.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(CommandError::NonPositiveScale { index, value });
        }
        Ok(Self { offset, scale })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    /// Mean and population standard deviation per dimension. Constant
    /// dimensions get scale 1 so they normalize to zero.
    pub fn from_samples<S: AsRef<[f64]>>(samples: &[S]) -> Result<Self, CommandError> {
        let first = samples.first().ok_or(CommandError::Empty)?.as_ref();
        let dim = first.len();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            let s = s.as_ref();
            if s.len() != dim {
                return Err(CommandError::Dimension { expected: dim, got: s.len() });
            }
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        // Second pass on the centered data, with a compensation term.
        let mut scale = vec![0.0; dim];
        for (d, sc) in scale.iter_mut().enumerate() {
            let (mut sq, mut lin) = (0.0, 0.0);
            for s in samples {
                let c = s.as_ref()[d] - mean[d];
                sq += c * c;
                lin += c;
            }
            let var = (sq - lin * lin / n) / n;
            let std = var.max(0.0).sqrt();
            *sc = if std > 1e-12 * mean[d].abs().max(1.0) { std } else { 1.0 };
        }
        Ok(Self { offset: mean, scale })
    }

    fn check(&self, len: usize) -> Result<(), CommandError> {
        if len != self.dim() {
            return Err(CommandError::Dimension {
                expected: self.dim(),
                got: len,
            });
        }
        Ok(())
    }

    pub fn normalize(&self, flat: &[f64]) -> Result<Vec<f64>, CommandError> {
        self.check(flat.len())?;
        Ok(flat
            .iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(x, (o, s))| (x - o) / s)
            .collect())
    }

    pub fn denormalize(&self, flat: &[f64]) -> Result<Vec<f64>, CommandError> {
        self.check(flat.len())?;
        Ok(flat
            .iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(x, (o, s))| x * s + o)
            .collect())
    }
}

/// Adds zero-mean Gaussian noise with per-dimension standard deviation
/// `fraction * stats.scale`, reproducibly from `seed`.
pub fn add_proprio_noise(
    flat: &[f64],
    fraction: f64,
    stats: Option<&NormalizationStats>,
    seed: u64,
) -> Result<Vec<f64>, CommandError> {
    if !(fraction >= 0.0) {
        return Err(CommandError::NegativeFraction(fraction));
    }
    let stats = stats.ok_or(CommandError::MissingStats)?;
    stats.check(flat.len())?;
    if fraction == 0.0 {
        return Ok(flat.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(flat
        .iter()
        .zip(&stats.scale)
        .map(|(x, s)| {
            let n: f64 = StandardNormal.sample(&mut rng);
            x + n * fraction * s
        })
        .collect())
}

/// Root pose and joint targets produced by retargeting one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSample {
    pub root: LinkPose,
    pub q: JointConfig,
    pub neck: NeckTarget,
    pub hands: HandTargets,
    pub timestamp: u64,
}

impl From<&RetargetResult> for PoseSample {
    fn from(r: &RetargetResult) -> Self {
        Self {
            root: r.root,
            q: r.q.clone(),
            neck: r.neck,
            hands: r.hands.clone(),
            timestamp: r.timestamp,
        }
    }
}

/// Roll, pitch, yaw of `R = Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn roll_pitch_yaw(rotation: &Matrix3<f64>) -> (f64, f64, f64) {
    Rotation3::from_matrix_unchecked(*rotation).euler_angles()
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a % two_pi;
    if w > std::f64::consts::PI {
        w -= two_pi;
    } else if w <= -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// Builds the command between two consecutive retargeted poses `dt` seconds apart.
///
/// Velocities are the world root displacement rotated into the heading
/// (yaw-only) frame of `prev`; height, roll and pitch are taken from `curr`.
pub fn derive_command(prev: &PoseSample, curr: &PoseSample, dt: f64) -> Result<CommandVector, CommandError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(CommandError::NonPositiveStep(dt));
    }
    for (what, s) in [("previous pose", prev), ("current pose", curr)] {
        if !s.root.is_finite() || !s.q.iter().all(|v| v.is_finite()) {
            return Err(CommandError::NonFinite(what));
        }
    }
    let (_, _, yaw_prev) = roll_pitch_yaw(&prev.root.rotation);
    let (roll, pitch, yaw_curr) = roll_pitch_yaw(&curr.root.rotation);
    let disp = curr.root.position - prev.root.position;
    let (s, c) = yaw_prev.sin_cos();
    let local = Vector2::new(c * disp.x + s * disp.y, -s * disp.x + c * disp.y);
    Ok(CommandVector {
        vx: local.x / dt,
        vy: local.y / dt,
        z: curr.root.position.z,
        roll,
        pitch,
        yaw_rate: wrap_angle(yaw_curr - yaw_prev) / dt,
        q_ref: curr.q.clone(),
        neck: curr.neck,
        hands: curr.hands.clone(),
        timestamp: curr.timestamp,
    })
}

/// Stateful command stream for one session: keeps the previous pose and
/// exponentially smooths the velocity terms.
#[derive(Debug, Clone)]
pub struct CommandDeriver {
    /// Weight of the newest raw velocity sample, in (0, 1]; 1 disables smoothing.
    smoothing: f64,
    prev: Option<PoseSample>,
    filtered: Option<[f64; 3]>,
}

impl CommandDeriver {
    pub const DEFAULT_SMOOTHING: f64 = 0.2;

    pub fn new(smoothing: f64) -> Self {
        Self {
            smoothing: smoothing.clamp(f64::MIN_POSITIVE, 1.0),
            prev: None,
            filtered: None,
        }
    }

    pub fn reset(&mut self) {
        self.prev = None;
        self.filtered = None;
    }

    /// Emits a command for `sample`. The first sample of a stream has zero
    /// velocities.
    pub fn push(&mut self, sample: PoseSample) -> Result<CommandVector, CommandError> {
        let mut cmd = match &self.prev {
            Some(prev) if sample.timestamp > prev.timestamp => {
                let dt = (sample.timestamp - prev.timestamp) as f64 * 1e-9;
                derive_command(prev, &sample, dt)?
            }
            _ => derive_command(&sample, &sample, 1.0)?,
        };
        let raw = [cmd.vx, cmd.vy, cmd.yaw_rate];
        let out = match self.filtered {
            Some(f) => {
                let a = self.smoothing;
                [
                    a * raw[0] + (1.0 - a) * f[0],
                    a * raw[1] + (1.0 - a) * f[1],
                    a * raw[2] + (1.0 - a) * f[2],
                ]
            }
            None => raw,
        };
        self.filtered = Some(out);
        cmd.vx = out[0];
        cmd.vy = out[1];
        cmd.yaw_rate = out[2];
        self.prev = Some(sample);
        Ok(cmd)
    }
}

impl Default for CommandDeriver {
    fn default() -> Self {
        Self::new(Self::DEFAULT_SMOOTHING)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn demo_layout() -> CommandLayout {
        CommandLayout::from_model(&RobotModel::demo())
    }

    fn sample(x: f64, y: f64, yaw: f64, t: u64) -> PoseSample {
        PoseSample {
            root: LinkPose::new(*Rotation3::from_euler_angles(0.0, 0.0, yaw).matrix(), Vector3::new(x, y, 0.7)),
            q: JointConfig::zeros(2),
            neck: NeckTarget::default(),
            hands: HandTargets::default(),
            timestamp: t,
        }
    }

    #[test]
    fn demo_layout_has_51_dims() {
        let layout = demo_layout();
        assert_eq!(layout.dim(), 51);
        assert_eq!(layout.names().len(), 51);
        assert_eq!(layout.names()[6], "left_hip_pitch_joint");
    }

    #[test]
    fn constant_forward_motion() {
        let cmd = derive_command(&sample(0.0, 0.0, 0.0, 0), &sample(0.01, 0.0, 0.0, 1), 0.02).unwrap();
        assert!((cmd.vx - 0.5).abs() < 1e-12);
        assert!(cmd.vy.abs() < 1e-12);
        assert_eq!(cmd.yaw_rate, 0.0);
    }

    #[test]
    fn heading_rotates_world_motion() {
        let cmd = derive_command(
            &sample(0.0, 0.0, FRAC_PI_2, 0),
            &sample(0.01, 0.0, FRAC_PI_2, 1),
            0.02,
        )
        .unwrap();
        assert!(cmd.vx.abs() < 1e-12, "{}", cmd.vx);
        assert!((cmd.vy + 0.5).abs() < 1e-12, "{}", cmd.vy);
    }

    #[test]
    fn stationary_pose_gives_zero_rates() {
        let s = sample(0.3, -0.2, 0.4, 5);
        let cmd = derive_command(&s, &s, 0.02).unwrap();
        assert_eq!((cmd.vx, cmd.vy, cmd.yaw_rate), (0.0, 0.0, 0.0));
        assert_eq!(cmd.z, 0.7);
        assert!(cmd.roll.abs() < 1e-15 && cmd.pitch.abs() < 1e-15);
    }

    #[test]
    fn non_positive_dt_rejected() {
        let s = sample(0.0, 0.0, 0.0, 0);
        assert_eq!(derive_command(&s, &s, 0.0), Err(CommandError::NonPositiveStep(0.0)));
        assert!(derive_command(&s, &s, -1.0).is_err());
    }

    #[test]
    fn non_finite_pose_rejected() {
        let s = sample(0.0, 0.0, 0.0, 0);
        let bad = sample(f64::NAN, 0.0, 0.0, 1);
        assert!(matches!(derive_command(&s, &bad, 0.02), Err(CommandError::NonFinite(_))));
    }

    #[test]
    fn yaw_seam_has_no_spike() {
        let rate = 0.5;
        let dt = 0.02;
        let mut prev = sample(0.0, 0.0, PI - 0.004, 0);
        for k in 1..10 {
            let curr = sample(0.0, 0.0, wrap_angle(PI - 0.004 + rate * dt * k as f64), k);
            let cmd = derive_command(&prev, &curr, dt).unwrap();
            assert!(cmd.yaw_rate.abs() <= rate + 1e-9, "{}", cmd.yaw_rate);
            prev = curr;
        }
    }

    #[test]
    fn wrong_length_unflatten_rejected() {
        let layout = demo_layout();
        assert!(matches!(
            CommandVector::unflatten(&layout, &[0.0; 50], 0),
            Err(CommandError::Dimension { expected: 51, got: 50 })
        ));
    }

    #[test]
    fn identity_stats_are_identity() {
        let stats = NormalizationStats::identity(3);
        let x = vec![1.5, -2.0, 3.25];
        assert_eq!(stats.normalize(&x).unwrap(), x);
    }

    #[test]
    fn non_positive_scale_rejected() {
        assert!(matches!(
            NormalizationStats::new(vec![0.0, 0.0], vec![1.0, 0.0]),
            Err(CommandError::NonPositiveScale { index: 1, .. })
        ));
    }

    #[test]
    fn noise_requires_stats_and_is_identity_at_zero() {
        let x = vec![1.0, 2.0];
        assert_eq!(add_proprio_noise(&x, 0.1, None, 1), Err(CommandError::MissingStats));
        let stats = NormalizationStats::identity(2);
        assert_eq!(add_proprio_noise(&x, 0.0, Some(&stats), 1).unwrap(), x);
        assert!(add_proprio_noise(&x, -0.1, Some(&stats), 1).is_err());
    }

    #[test]
    fn noise_is_reproducible() {
        let x: Vec<f64> = (0..51).map(|i| i as f64 * 0.1).collect();
        let stats = NormalizationStats::new(vec![0.0; 51], vec![2.0; 51]).unwrap();
        let a = add_proprio_noise(&x, 0.1, Some(&stats), 42).unwrap();
        let b = add_proprio_noise(&x, 0.1, Some(&stats), 42).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, x);
    }

    #[test]
    fn noise_stdev_matches_fraction_of_scale() {
        let stats = NormalizationStats::new(vec![0.0], vec![3.0]).unwrap();
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for seed in 0..n {
            let v = add_proprio_noise(&[1.0], 0.1, Some(&stats), seed).unwrap()[0] - 1.0;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.3).abs() / 0.3 < 0.02, "{std}");
    }

    #[test]
    fn deriver_smooths_velocities() {
        let mut d = CommandDeriver::new(0.2);
        let first = d.push(sample(0.0, 0.0, 0.0, 0)).unwrap();
        assert_eq!(first.vx, 0.0);
        let second = d.push(sample(0.01, 0.0, 0.0, 20_000_000)).unwrap();
        assert!((second.vx - 0.2 * 0.5).abs() < 1e-12);
        let mut raw = CommandDeriver::new(1.0);
        raw.push(sample(0.0, 0.0, 0.0, 0)).unwrap();
        let unsmoothed = raw.push(sample(0.01, 0.0, 0.0, 20_000_000)).unwrap();
        assert!((unsmoothed.vx - 0.5).abs() < 1e-12);
    }

    fn arb_flat(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1e3f64..1e3, dim)
    }

    proptest! {
        #[test]
        fn flatten_unflatten_bijection(flat in arb_flat(51), ts in any::<u64>()) {
            let layout = demo_layout();
            let cmd = CommandVector::unflatten(&layout, &flat, ts).unwrap();
            let back = cmd.flatten(&layout).unwrap();
            prop_assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(CommandVector::unflatten(&layout, &back, ts).unwrap(), cmd);
        }

        #[test]
        fn normalize_round_trip(flat in arb_flat(8), offs in arb_flat(8), scales in proptest::collection::vec(0.01f64..100.0, 8)) {
            let stats = NormalizationStats::new(offs, scales).unwrap();
            let back = stats.denormalize(&stats.normalize(&flat).unwrap()).unwrap();
            for (a, b) in back.iter().zip(&flat) {
                prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0) * 1e3);
            }
        }

        #[test]
        fn heading_frame_invariance(
            rot in -PI..PI,
            yaw0 in -PI..PI,
            vx in -1.0f64..1.0, vy in -1.0f64..1.0, wz in -2.0f64..2.0,
        ) {
            let dt = 0.02;
            let world = Rotation3::from_euler_angles(0.0, 0.0, rot);
            let mut prev: Option<(PoseSample, PoseSample)> = None;
            let (mut x, mut y, mut yaw) = (0.3, -0.1, yaw0);
            for k in 0..5u64 {
                let a = sample(x, y, yaw, k);
                let p = world * Vector3::new(x, y, 0.0);
                let b = sample(p.x, p.y, wrap_angle(yaw + rot), k);
                if let Some((pa, pb)) = &prev {
                    let ca = derive_command(pa, &a, dt).unwrap();
                    let cb = derive_command(pb, &b, dt).unwrap();
                    prop_assert!((ca.vx - cb.vx).abs() < 1e-10);
                    prop_assert!((ca.vy - cb.vy).abs() < 1e-10);
                    prop_assert!((ca.yaw_rate - cb.yaw_rate).abs() < 1e-10);
                }
                prev = Some((a, b));
                let (s, c) = yaw.sin_cos();
                x += (c * vx - s * vy) * dt;
                y += (s * vx + c * vy) * dt;
                yaw = wrap_angle(yaw + wz * dt);
            }
        }
    }
}
