//! Core of the tw2 humanoid teleoperation pipeline.
//!
//! - [`model`]: kinematic tree, forward kinematics and Jacobians
//! - [`retarget`]: human pose to robot joint, neck and hand targets
//! - [`command`]: the command vector stream and normalization utilities
//! - [`tracker`]: PD-tracked kinematic stand-in for the low-level controller
//! - [`episode`]: demonstration file format, segmentation and idle filtering
//! - [`motion`]: synthetic human motion and the pose file format
//! - [`policy`]: action-chunk scheduling and proprioceptive history

pub mod command;
pub mod config;
pub mod episode;
pub mod error;
pub mod model;
pub mod motion;
pub mod policy;
pub mod retarget;
pub mod tracker;

pub use command::{CommandLayout, CommandVector, NormalizationStats, ProprioState};
pub use error::{CommandError, EpisodeError, ModelError, MotionError, PolicyError, RetargetError, SimError};
pub use model::{JointConfig, LinkPose, RobotModel};
pub use retarget::{GraspCommand, GraspMode, HumanPoseFrame, RetargetResult, Retargeter};
