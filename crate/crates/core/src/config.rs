//! Serde mirror of the model config file.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub links: Vec<LinkSpec>,
    #[serde(default)]
    pub joints: Vec<JointSpec>,
    #[serde(default)]
    pub groups: GroupsSpec,
    #[serde(default)]
    pub mapping: Vec<MappingSpec>,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub neck: NeckConfig,
    #[serde(default)]
    pub hands: HandsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    /// Origin translation relative to the parent link, meters.
    #[serde(default)]
    pub xyz: [f64; 3],
    /// Origin rotation relative to the parent link (roll, pitch, yaw), radians.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl LinkSpec {
    pub fn root(name: &str) -> Self {
        Self {
            name: name.into(),
            parent: None,
            xyz: [0.0; 3],
            rpy: [0.0; 3],
        }
    }

    pub fn child(name: &str, parent: &str, xyz: [f64; 3]) -> Self {
        Self {
            name: name.into(),
            parent: Some(parent.into()),
            xyz,
            rpy: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointSpec {
    pub name: String,
    #[serde(rename = "type", default = "default_joint_type")]
    pub kind: String,
    /// The link this joint drives.
    pub link: String,
    pub axis: [f64; 3],
    pub limits: [f64; 2],
}

fn default_joint_type() -> String {
    "revolute".into()
}

impl JointSpec {
    pub fn revolute(name: &str, link: &str, axis: [f64; 3], limits: [f64; 2]) -> Self {
        Self {
            name: name.into(),
            kind: default_joint_type(),
            link: link.into(),
            axis,
            limits,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupsSpec {
    #[serde(default)]
    pub lower: Vec<String>,
    #[serde(default)]
    pub upper: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    pub human: String,
    pub robot: String,
    #[serde(default)]
    pub offset_rpy: [f64; 3],
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSpec {
    /// Rotation weight for every mapped link without an explicit entry.
    #[serde(default = "one")]
    pub rotation_default: f64,
    #[serde(default)]
    pub rotation: BTreeMap<String, f64>,
    /// Position weights; a positive entry puts the link in the position set.
    #[serde(default)]
    pub position: BTreeMap<String, f64>,
}

impl Default for WeightsSpec {
    fn default() -> Self {
        Self {
            rotation_default: 1.0,
            rotation: BTreeMap::new(),
            position: BTreeMap::new(),
        }
    }
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub lambda_pos: f64,
    pub max_iterations: usize,
    /// Stop when the accepted step's infinity norm falls below this.
    pub step_tolerance: f64,
    /// Stop when an accepted step lowers the objective by less than this.
    pub decrease_tolerance: f64,
    /// Initial damping relative to the largest diagonal entry of JᵀJ.
    pub initial_damping: f64,
    /// Keep a position term on the root link.
    pub include_pelvis: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda_pos: 1.0,
            max_iterations: 30,
            step_tolerance: 1e-6,
            decrease_tolerance: 1e-10,
            initial_damping: 1e-3,
            include_pelvis: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeckConfig {
    /// Human link providing the head rotation.
    pub head: String,
    /// Human link providing the spine rotation.
    pub spine: String,
    pub yaw_limits: [f64; 2],
    pub pitch_limits: [f64; 2],
}

impl Default for NeckConfig {
    fn default() -> Self {
        Self {
            head: "Head".into(),
            spine: "Spine3".into(),
            yaw_limits: [-std::f64::consts::PI, std::f64::consts::PI],
            pitch_limits: [-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandsConfig {
    #[serde(default)]
    pub left: HandSideConfig,
    #[serde(default)]
    pub right: HandSideConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HandSideConfig {
    #[serde(default)]
    pub joints: Vec<String>,
    #[serde(default)]
    pub lower: Vec<f64>,
    #[serde(default)]
    pub upper: Vec<f64>,
    #[serde(default)]
    pub power: GripPoses,
    #[serde(default)]
    pub pinch: GripPoses,
}

impl HandSideConfig {
    pub fn dof(&self) -> usize {
        self.lower.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GripPoses {
    pub open: Vec<f64>,
    pub close: Vec<f64>,
}
