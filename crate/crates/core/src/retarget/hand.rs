//! Gripper-style hand retargeting.

use serde::{Deserialize, Serialize};

use crate::config::HandSideConfig;
use crate::error::RetargetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraspMode {
    #[default]
    Power,
    Pinch,
}

/// Scalar grasp command: 0 is fully open, 1 fully closed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GraspCommand {
    alpha: f64,
    pub mode: GraspMode,
}

impl GraspCommand {
    pub fn new(alpha: f64, mode: GraspMode) -> Result<Self, RetargetError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(RetargetError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha, mode })
    }

    /// Maps a raw controller trigger reading onto alpha, clamping to [0, 1].
    pub fn from_trigger(trigger: f64, mode: GraspMode) -> Self {
        let alpha = if trigger.is_finite() { trigger.clamp(0.0, 1.0) } else { 0.0 };
        Self { alpha, mode }
    }

    pub fn open(mode: GraspMode) -> Self {
        Self { alpha: 0.0, mode }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GripperPoses {
    pub open: Vec<f64>,
    pub close: Vec<f64>,
}

impl GripperPoses {
    pub fn for_mode(hand: &HandSideConfig, mode: GraspMode) -> Self {
        let poses = match mode {
            GraspMode::Power => &hand.power,
            GraspMode::Pinch => &hand.pinch,
        };
        Self {
            open: poses.open.clone(),
            close: poses.close.clone(),
        }
    }
}

/// `(1 - alpha) * q_open + alpha * q_close`.
pub fn retarget_hand(poses: &GripperPoses, cmd: &GraspCommand) -> Vec<f64> {
    let a = cmd.alpha;
    poses
        .open
        .iter()
        .zip(&poses.close)
        .map(|(o, c)| (1.0 - a) * o + a * c)
        .collect()
}
