//! Neck yaw/pitch from the head rotation relative to the spine.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::config::NeckConfig;
use crate::error::RetargetError;
use crate::retarget::HumanPoseFrame;

/// Below this |cos(pitch)| the yaw angle is not observable.
const GIMBAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NeckTarget {
    pub yaw: f64,
    pub pitch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeckSolution {
    pub target: NeckTarget,
    /// Pitch at +-pi/2, where yaw and roll are coupled.
    pub degenerate: bool,
}

/// Reads (yaw, pitch) from a relative rotation assumed to be `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn extract_yaw_pitch(rel: &Matrix3<f64>) -> (f64, f64, bool) {
    let yaw = rel[(1, 0)].atan2(rel[(0, 0)]);
    let pitch = (-rel[(2, 0)]).clamp(-1.0, 1.0).asin();
    let degenerate = rel[(0, 0)].hypot(rel[(1, 0)]) < GIMBAL_TOL;
    (yaw, pitch, degenerate)
}

pub fn neck_from_rotations(head: &Matrix3<f64>, spine: &Matrix3<f64>, limits: &NeckConfig) -> NeckSolution {
    let rel = spine.transpose() * head;
    let (yaw, pitch, degenerate) = extract_yaw_pitch(&rel);
    NeckSolution {
        target: NeckTarget {
            yaw: yaw.clamp(limits.yaw_limits[0], limits.yaw_limits[1]),
            pitch: pitch.clamp(limits.pitch_limits[0], limits.pitch_limits[1]),
        },
        degenerate,
    }
}

pub fn retarget_neck(frame: &HumanPoseFrame, neck: &NeckConfig) -> Result<NeckSolution, RetargetError> {
    let head = frame
        .get(&neck.head)
        .ok_or_else(|| RetargetError::MissingLink(neck.head.clone()))?;
    let spine = frame
        .get(&neck.spine)
        .ok_or_else(|| RetargetError::MissingLink(neck.spine.clone()))?;
    Ok(neck_from_rotations(&head.rotation, &spine.rotation, neck))
}
