//! Human-to-robot retargeting: body joints, neck and hands.

pub mod body;
pub mod hand;
pub mod neck;

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::Vector3;

use crate::error::RetargetError;
use crate::model::{JointConfig, LinkPose, RobotModel};

pub use body::{retarget_body, BodySolution, BodyTargets, SolveTrace};
pub use hand::{retarget_hand, GraspCommand, GraspMode, GripperPoses};
pub use neck::{retarget_neck, NeckSolution, NeckTarget};

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedLink {
    pub pose: LinkPose,
    pub present: bool,
}

/// One timestamped sample of world-frame human link poses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HumanPoseFrame {
    /// Nanoseconds, monotonic per source.
    pub timestamp: u64,
    links: BTreeMap<String, TrackedLink>,
}

impl HumanPoseFrame {
    pub fn new(timestamp: u64) -> Self {
        Self {
            timestamp,
            links: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, pose: LinkPose) {
        self.links.insert(name.to_string(), TrackedLink { pose, present: true });
    }

    pub fn insert_tracked(&mut self, name: &str, link: TrackedLink) {
        self.links.insert(name.to_string(), link);
    }

    pub fn set_present(&mut self, name: &str, present: bool) {
        if let Some(l) = self.links.get_mut(name) {
            l.present = present;
        }
    }

    /// The pose of `name` if it is tracked and valid this frame.
    pub fn get(&self, name: &str) -> Option<&LinkPose> {
        self.links.get(name).filter(|l| l.present).map(|l| &l.pose)
    }

    pub fn links(&self) -> impl Iterator<Item = (&str, &TrackedLink)> {
        self.links.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    /// The same frame with every link position shifted by `offset`.
    pub fn translated(&self, offset: &Vector3<f64>) -> Self {
        let mut out = self.clone();
        for l in out.links.values_mut() {
            l.pose.position += offset;
        }
        out
    }

    pub fn validate(&self, pelvis: &str) -> Result<(), RetargetError> {
        if self.get(pelvis).is_none() {
            return Err(RetargetError::MissingLink(pelvis.to_string()));
        }
        for (name, l) in &self.links {
            if l.present && !(l.pose.is_finite() && l.pose.is_proper_rotation(ROTATION_TOL)) {
                return Err(RetargetError::InvalidFrame(format!("link `{name}` has an invalid pose")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct HandTargets {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RetargetResult {
    pub timestamp: u64,
    /// World pose assigned to the robot root (the human pelvis).
    pub root: LinkPose,
    pub q: JointConfig,
    pub neck: NeckTarget,
    pub neck_degenerate: bool,
    pub hands: HandTargets,
    pub residual: f64,
    pub iterations: usize,
    pub degraded: bool,
}

/// Retargets one streamed frame: body, neck and both hands.
pub fn retarget_frame(
    model: &RobotModel,
    frame: &HumanPoseFrame,
    grasp_left: &GraspCommand,
    grasp_right: &GraspCommand,
    warm_start: Option<&JointConfig>,
) -> Result<RetargetResult, RetargetError> {
    let pelvis_name = body::human_pelvis_name(model);
    frame.validate(pelvis_name)?;
    let body = retarget_body(model, frame, warm_start)?;
    let neck = retarget_neck(frame, model.neck())?;
    let hands = HandTargets {
        left: retarget_hand(&GripperPoses::for_mode(&model.hands().left, grasp_left.mode), grasp_left),
        right: retarget_hand(&GripperPoses::for_mode(&model.hands().right, grasp_right.mode), grasp_right),
    };
    let root = *frame.get(pelvis_name).expect("validated above");
    Ok(RetargetResult {
        timestamp: frame.timestamp,
        root,
        q: body.q,
        neck: neck.target,
        neck_degenerate: neck.degenerate,
        hands,
        residual: body.residual,
        iterations: body.iterations,
        degraded: body.degraded,
    })
}

/// Per-session retargeter holding the warm start between frames.
///
/// Not reentrant; run one instance per teleoperation session.
#[derive(Debug, Clone)]
pub struct Retargeter {
    model: Arc<RobotModel>,
    warm_start: Option<JointConfig>,
}

impl Retargeter {
    pub fn new(model: Arc<RobotModel>) -> Self {
        Self {
            model,
            warm_start: None,
        }
    }

    pub fn model(&self) -> &RobotModel {
        &self.model
    }

    pub fn reset(&mut self) {
        self.warm_start = None;
    }

    pub fn retarget(
        &mut self,
        frame: &HumanPoseFrame,
        grasp_left: &GraspCommand,
        grasp_right: &GraspCommand,
    ) -> Result<RetargetResult, RetargetError> {
        let result = retarget_frame(&self.model, frame, grasp_left, grasp_right, self.warm_start.as_ref())?;
        if !result.degraded {
            self.warm_start = Some(result.q.clone());
        }
        Ok(result)
    }
}
