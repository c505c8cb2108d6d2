//! Synthetic human motion and the `.tw2p` pose file.
//!
//! Motions are produced by driving the robot model itself through scripted
//! joint and root trajectories and reading off the mapped link poses, so the
//! frames are kinematically consistent and exactly retargetable. A `Head`
//! link is added on top of the torso for the neck.
//!
//! ```text
//! "TW2P" | version u32 | header_len u32 | header JSON
//! frames: ts u64 | grasp_left f64 | grasp_right f64 | per link: present u8, rotation f64 x 9 (row-major), position f64 x 3
//! ```

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::MotionError;
use crate::model::{LinkPose, RobotModel};
use crate::retarget::body::frame_from_robot;
use crate::retarget::{HumanPoseFrame, TrackedLink};

pub const MAGIC: &[u8; 4] = b"TW2P";
pub const VERSION: u32 = 1;
/// Frame rate of generated motion, Hz.
pub const RATE_HZ: f64 = 100.0;
const HEAD_OFFSET: [f64; 3] = [0.0, 0.0, 0.45];
const LINK_BYTES: usize = 1 + 12 * 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionKind {
    Walk,
    Crouch,
    Reach,
    HeadScan,
}

impl FromStr for MotionKind {
    type Err = MotionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "walk" => Ok(Self::Walk),
            "crouch" => Ok(Self::Crouch),
            "reach" => Ok(Self::Reach),
            "head-scan" => Ok(Self::HeadScan),
            other => Err(MotionError::UnknownKind(other.to_string())),
        }
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Walk => "walk",
            Self::Crouch => "crouch",
            Self::Reach => "reach",
            Self::HeadScan => "head-scan",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionHeader {
    pub kind: Option<MotionKind>,
    pub seed: Option<u64>,
    pub rate_hz: f64,
    pub links: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSample {
    pub frame: HumanPoseFrame,
    /// Trigger values for the left and right hand, in [0, 1].
    pub grasp: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    pub header: MotionHeader,
    pub samples: Vec<MotionSample>,
}

/// Scripted robot configuration at one instant.
struct Pose {
    q: Vec<f64>,
    root: LinkPose,
    neck: (f64, f64),
    grasp: [f64; 2],
}

struct Joints<'a> {
    names: Vec<String>,
    model: &'a RobotModel,
}

impl Joints<'_> {
    fn set(&self, q: &mut [f64], name: &str, value: f64) {
        if let Some(i) = self.names.iter().position(|n| n == name) {
            let j = &self.model.joints()[i];
            q[i] = value.clamp(j.lower, j.upper);
        }
    }

    fn side(&self, q: &mut [f64], side: &str, joint: &str, value: f64) {
        self.set(q, &format!("{side}_{joint}_joint"), value);
    }
}

/// Per-run variation drawn from the seed.
struct Jitter {
    amp: f64,
    freq: f64,
    phase: f64,
    turn: f64,
}

impl Jitter {
    fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            amp: rng.random_range(0.9..1.1),
            freq: rng.random_range(0.9..1.1),
            phase: rng.random_range(0.0..TAU),
            turn: rng.random_range(-1.0..1.0),
        }
    }
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// 0 at both ends of `[0, duration]`, 1 in the middle.
fn bump(t: f64, duration: f64) -> f64 {
    (PI * t / duration).sin().powi(2)
}

fn root_pose(x: f64, y: f64, z: f64, roll: f64, pitch: f64, yaw: f64) -> LinkPose {
    LinkPose::new(
        *Rotation3::from_euler_angles(roll, pitch, yaw).matrix(),
        Vector3::new(x, y, z),
    )
}

const STAND_Z: f64 = 0.78;

fn script(kind: MotionKind, joints: &Joints, jit: &Jitter, duration: f64, n: usize) -> Vec<Pose> {
    let dt = 1.0 / RATE_HZ;
    let dof = joints.names.len();
    let (mut x, mut y) = (0.0, 0.0);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * dt;
        let mut q = vec![0.0; dof];
        let neck: (f64, f64);
        let mut grasp = [0.0, 0.0];
        let root = match kind {
            MotionKind::Walk => {
                let ramp = smoothstep(t / 1.5);
                let phase = TAU * 0.9 * jit.freq * t + jit.phase;
                let a = jit.amp * ramp;
                for (side, off) in [("left", 0.0), ("right", PI)] {
                    let s = (phase + off).sin();
                    let c = (phase + off).cos();
                    joints.side(&mut q, side, "hip_pitch", -0.35 * a * s);
                    joints.side(&mut q, side, "knee", 0.4 + 0.3 * a * c);
                    joints.side(&mut q, side, "ankle_pitch", -0.2 - 0.15 * a * s);
                    joints.side(&mut q, side, "hip_roll", 0.04 * a * c * if side == "left" { 1.0 } else { -1.0 });
                    joints.side(&mut q, side, "shoulder_pitch", 0.3 * a * s);
                    joints.side(&mut q, side, "elbow", 0.35 + 0.1 * a * c);
                    joints.side(&mut q, side, "shoulder_roll", if side == "left" { 0.15 } else { -0.15 });
                }
                joints.set(&mut q, "waist_yaw_joint", 0.08 * a * phase.sin());
                neck = (0.1 * (TAU * 0.2 * t).sin(), 0.05 * (TAU * 0.13 * t).sin());
                let yaw = 0.3 * jit.turn * (TAU * t / 12.0).sin();
                let speed = 0.5 * ramp * jit.amp;
                x += speed * yaw.cos() * dt;
                y += speed * yaw.sin() * dt;
                root_pose(x, y, STAND_Z + 0.01 * a * (2.0 * phase).sin(), 0.015 * a * phase.sin(), 0.02, yaw)
            }
            MotionKind::Crouch => {
                let s = bump(t, duration) * jit.amp.min(1.0);
                for side in ["left", "right"] {
                    joints.side(&mut q, side, "hip_pitch", -0.7 * s);
                    joints.side(&mut q, side, "knee", 0.1 + 1.4 * s);
                    joints.side(&mut q, side, "ankle_pitch", -0.1 - 0.7 * s);
                    joints.side(&mut q, side, "shoulder_pitch", -0.4 * s);
                    joints.side(&mut q, side, "elbow", 0.3 + 0.4 * s);
                }
                joints.set(&mut q, "waist_pitch_joint", 0.3 * s);
                neck = (0.0, 0.2 * s);
                root_pose(0.0, 0.0, STAND_Z - 0.3 * s, 0.0, 0.15 * s, 0.0)
            }
            MotionKind::Reach => {
                let period = 4.0 / jit.freq;
                for (side, off, sign) in [("left", 0.0, 1.0), ("right", 0.5, -1.0)] {
                    let u = ((t / period + off + jit.phase / TAU) % 1.0) * period;
                    let s = bump(u, period) * jit.amp.min(1.0);
                    joints.side(&mut q, side, "shoulder_pitch", -1.3 * s);
                    joints.side(&mut q, side, "shoulder_roll", sign * (0.2 + 0.2 * s));
                    joints.side(&mut q, side, "shoulder_yaw", sign * 0.3 * s);
                    joints.side(&mut q, side, "elbow", 1.0 - 0.8 * s);
                    joints.side(&mut q, side, "wrist_roll", sign * 0.4 * s);
                    joints.side(&mut q, side, "wrist_pitch", -0.3 * s);
                    joints.side(&mut q, side, "knee", 0.1);
                    joints.side(&mut q, side, "hip_pitch", -0.05);
                    joints.side(&mut q, side, "ankle_pitch", -0.05);
                    grasp[if side == "left" { 0 } else { 1 }] = smoothstep((s - 0.6) / 0.3);
                }
                joints.set(&mut q, "waist_yaw_joint", 0.2 * (TAU * t / period).sin());
                joints.set(&mut q, "waist_pitch_joint", 0.1);
                neck = (0.2 * (TAU * t / period).sin(), 0.3);
                root_pose(0.0, 0.0, STAND_Z, 0.0, 0.0, 0.0)
            }
            MotionKind::HeadScan => {
                let w = TAU * 0.25 * jit.freq;
                neck = (0.6 * (w * t).sin(), 0.25 * (0.7 * w * t + jit.phase).sin());
                joints.set(&mut q, "waist_yaw_joint", 0.05 * (w * t).sin());
                for side in ["left", "right"] {
                    joints.side(&mut q, side, "knee", 0.1);
                    joints.side(&mut q, side, "elbow", 0.3);
                }
                root_pose(0.0, 0.0, STAND_Z, 0.0, 0.0, 0.0)
            }
        };
        out.push(Pose { q, root, neck, grasp });
    }
    out
}

/// Deterministic motion of `kind` sampled at [`RATE_HZ`] for `duration` seconds.
pub fn gen_synthetic_motion(
    model: &RobotModel,
    kind: MotionKind,
    duration: f64,
    seed: u64,
) -> Result<Motion, MotionError> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(MotionError::InvalidDuration(duration));
    }
    let n = (duration * RATE_HZ).round().max(1.0) as usize;
    let joints = Joints {
        names: model.joint_names(),
        model,
    };
    let torso = model
        .link_index("torso_link")
        .ok_or_else(|| MotionError::Format("model has no torso_link".into()))?;
    let neck_cfg = model.neck();
    let links = pose_links(model);
    let jit = Jitter::draw(seed);
    let mut samples = Vec::with_capacity(n);
    for (k, pose) in script(kind, &joints, &jit, duration, n).into_iter().enumerate() {
        let ts = k as u64 * (1e9 / RATE_HZ) as u64;
        let mut frame = frame_from_robot(model, &pose.q, &pose.root, ts);
        let fk = model.forward_kinematics(&pose.q, &pose.root)?;
        let torso_pose = fk.by_index(torso);
        let rel = Rotation3::from_euler_angles(0.0, pose.neck.1, pose.neck.0);
        let head = LinkPose::new(
            torso_pose.rotation * rel.matrix(),
            torso_pose.position + torso_pose.rotation * Vector3::from(HEAD_OFFSET),
        );
        frame.insert(&neck_cfg.head, head);
        samples.push(MotionSample {
            frame,
            grasp: pose.grasp,
        });
    }
    Ok(Motion {
        header: MotionHeader {
            kind: Some(kind),
            seed: Some(seed),
            rate_hz: RATE_HZ,
            links,
        },
        samples,
    })
}

/// Link names carried by motions generated for `model`, in file order.
pub fn pose_links(model: &RobotModel) -> Vec<String> {
    let mut links: Vec<String> = model.mapping().iter().map(|m| m.human.clone()).collect();
    links.push(model.neck().head.clone());
    links
}

/// Encodes one frame in the pose-file record layout.
pub fn encode_sample(sample: &MotionSample, links: &[String]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + LINK_BYTES * links.len());
    encode_sample_into(sample, links, &mut out);
    out
}

fn encode_sample_into(sample: &MotionSample, links: &[String], out: &mut Vec<u8>) {
    out.extend_from_slice(&sample.frame.timestamp.to_le_bytes());
    out.extend_from_slice(&sample.grasp[0].to_le_bytes());
    out.extend_from_slice(&sample.grasp[1].to_le_bytes());
    let tracked: std::collections::BTreeMap<&str, &TrackedLink> = sample.frame.links().collect();
    for name in links {
        let (present, pose) = match tracked.get(name.as_str()) {
            Some(l) => (l.present, l.pose),
            None => (false, LinkPose::identity()),
        };
        out.push(present as u8);
        for r in 0..3 {
            for c in 0..3 {
                out.extend_from_slice(&pose.rotation[(r, c)].to_le_bytes());
            }
        }
        pose.position.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
}

/// Inverse of [`encode_sample`].
pub fn decode_sample(rec: &[u8], links: &[String]) -> Result<MotionSample, MotionError> {
    if rec.len() != 24 + LINK_BYTES * links.len() {
        return Err(MotionError::Format(format!(
            "frame of {} bytes, expected {}",
            rec.len(),
            24 + LINK_BYTES * links.len()
        )));
    }
    let f64_at = |b: &[u8], i: usize| f64::from_le_bytes(b[i..i + 8].try_into().unwrap());
    let ts = u64::from_le_bytes(rec[..8].try_into().unwrap());
    let grasp = [f64_at(rec, 8), f64_at(rec, 16)];
    let mut frame = HumanPoseFrame::new(ts);
    for (j, name) in links.iter().enumerate() {
        let b = &rec[24 + j * LINK_BYTES..24 + (j + 1) * LINK_BYTES];
        let present = b[0] != 0;
        let v: Vec<f64> = (0..12).map(|i| f64_at(b, 1 + 8 * i)).collect();
        let pose = LinkPose::new(Matrix3::from_row_slice(&v[..9]), Vector3::new(v[9], v[10], v[11]));
        frame.insert_tracked(name, TrackedLink { pose, present });
    }
    Ok(MotionSample { frame, grasp })
}

impl Motion {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, MotionError> {
        let json = serde_json::to_vec(&self.header).map_err(|e| MotionError::Format(e.to_string()))?;
        let stride = 24 + LINK_BYTES * self.header.links.len();
        let mut out = Vec::with_capacity(12 + json.len() + stride * self.samples.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for sample in &self.samples {
            encode_sample_into(sample, &self.header.links, &mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, MotionError> {
        let fail = |m: &str| MotionError::Format(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(fail("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(MotionError::Format(format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12 + hlen..).ok_or_else(|| fail("truncated header"))?;
        let header: MotionHeader =
            serde_json::from_slice(&bytes[12..12 + hlen]).map_err(|e| MotionError::Format(e.to_string()))?;
        let stride = 24 + LINK_BYTES * header.links.len();
        if body.len() % stride != 0 {
            return Err(fail("truncated frame data"));
        }
        let samples = body
            .chunks_exact(stride)
            .map(|rec| decode_sample(rec, &header.links))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { header, samples })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MotionError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, MotionError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retarget::retarget_neck;

    #[test]
    fn unknown_kind_and_bad_duration() {
        assert!(matches!("jog".parse::<MotionKind>(), Err(MotionError::UnknownKind(_))));
        assert!(matches!(
            gen_synthetic_motion(&RobotModel::demo(), MotionKind::Walk, 0.0, 1),
            Err(MotionError::InvalidDuration(_))
        ));
        for kind in ["walk", "crouch", "reach", "head-scan"] {
            assert_eq!(kind.parse::<MotionKind>().unwrap().to_string(), kind);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let model = RobotModel::demo();
        let a = gen_synthetic_motion(&model, MotionKind::Walk, 2.0, 7).unwrap();
        let b = gen_synthetic_motion(&model, MotionKind::Walk, 2.0, 7).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        assert_eq!(a.len(), 200);
        let c = gen_synthetic_motion(&model, MotionKind::Walk, 2.0, 8).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn file_round_trip() {
        let model = RobotModel::demo();
        let m = gen_synthetic_motion(&model, MotionKind::Reach, 0.5, 3).unwrap();
        assert_eq!(Motion::from_bytes(&m.to_bytes().unwrap()).unwrap(), m);
        assert!(Motion::from_bytes(b"TW2Pxxxx").is_err());
    }

    #[test]
    fn crouch_lowers_pelvis() {
        let model = RobotModel::demo();
        let m = gen_synthetic_motion(&model, MotionKind::Crouch, 4.0, 1).unwrap();
        let z = |i: usize| m.samples[i].frame.get("Pelvis").unwrap().position.z;
        assert!(z(0) - z(m.len() / 2) >= 0.2, "{} {}", z(0), z(m.len() / 2));
    }

    #[test]
    fn head_scan_sweeps_neck_yaw() {
        let model = RobotModel::demo();
        let m = gen_synthetic_motion(&model, MotionKind::HeadScan, 8.0, 2).unwrap();
        let yaws: Vec<f64> = m
            .samples
            .iter()
            .map(|s| retarget_neck(&s.frame, model.neck()).unwrap().target.yaw)
            .collect();
        let max = yaws.iter().cloned().fold(f64::MIN, f64::max);
        let min = yaws.iter().cloned().fold(f64::MAX, f64::min);
        assert!((max - 0.6).abs() < 1e-3 && (min + 0.6).abs() < 1e-3, "{min} {max}");
    }

    #[test]
    fn frames_are_valid() {
        let model = RobotModel::demo();
        for kind in [MotionKind::Walk, MotionKind::Crouch, MotionKind::Reach, MotionKind::HeadScan] {
            let m = gen_synthetic_motion(&model, kind, 1.0, 5).unwrap();
            for s in &m.samples {
                s.frame.validate("Pelvis").unwrap();
                assert!(s.grasp.iter().all(|g| (0.0..=1.0).contains(g)));
            }
        }
    }
}
