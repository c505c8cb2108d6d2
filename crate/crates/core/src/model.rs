//! Kinematic humanoid model.
//!
//! A [`RobotModel`] is a tree of links, each attached to its parent through a
//! fixed origin transform optionally followed by one revolute joint. Link
//! frames are evaluated as
//!
//! ```text
//! T_link = T_parent * origin * Rot(axis, q_joint)
//! ```
//!
//! so a joint rotates about the origin of the link it drives. Models are
//! loaded from the TOML config format documented in `assets/README.md`.

use std::collections::HashMap;
use std::fmt;
use std::ops::Deref;
use std::path::Path;

use nalgebra::{DMatrix, Isometry3, Matrix3, Rotation3, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{HandSideConfig, HandsConfig, ModelConfig, NeckConfig, SolverConfig};
use crate::error::ModelError;

const AXIS_NORM_TOL: f64 = 1e-9;

/// The bundled 29-joint demo humanoid.
pub const DEMO_HUMANOID_TOML: &str = include_str!("../assets/demo_humanoid.toml");

/// World pose of a single link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkPose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl LinkPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>) -> Self {
        Self { rotation, position }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Self {
            rotation: iso.rotation.to_rotation_matrix().into_inner(),
            position: iso.translation.vector,
        }
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        Isometry3::from_parts(Translation3::from(self.position), rot)
    }

    /// `self * other` as rigid transforms.
    pub fn compose(&self, other: &LinkPose) -> LinkPose {
        LinkPose {
            rotation: self.rotation * other.rotation,
            position: self.rotation * other.position + self.position,
        }
    }

    pub fn inverse(&self) -> LinkPose {
        let rt = self.rotation.transpose();
        LinkPose {
            rotation: rt,
            position: -(rt * self.position),
        }
    }

    /// Checks `RᵀR = I` and `det(R) = +1` within `tol`.
    pub fn is_proper_rotation(&self, tol: f64) -> bool {
        let should_be_identity = self.rotation.transpose() * self.rotation;
        (should_be_identity - Matrix3::identity()).abs().max() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.position.iter()).all(|v| v.is_finite())
    }
}

impl Default for LinkPose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Joint positions in radians, one entry per model joint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointConfig(Vec<f64>);

impl JointConfig {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for JointConfig {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    pub origin: Isometry3<f64>,
    /// Index of the joint driving this link, if any.
    pub joint: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub axis: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
    /// Link whose frame this joint rotates.
    pub link: usize,
}

impl Joint {
    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.lower, self.upper)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BodyGroup {
    Lower,
    Upper,
}

/// One human link mapped onto a robot link.
#[derive(Debug, Clone)]
pub struct LinkMapping {
    pub human: String,
    pub robot: String,
    pub link: usize,
    /// Applied on the right of the human rotation before comparison.
    pub offset: UnitQuaternion<f64>,
    /// Required links must be present in every frame.
    pub required: bool,
}

#[derive(Debug, Clone)]
pub struct RobotModel {
    name: String,
    links: Vec<Link>,
    joints: Vec<Joint>,
    link_index: HashMap<String, usize>,
    /// Joint indices on the root-to-link path, ordered from the root.
    chains: Vec<Vec<usize>>,
    groups: Vec<Option<BodyGroup>>,
    mapping: Vec<LinkMapping>,
    rotation_weights: Vec<f64>,
    position_weights: Vec<f64>,
    position_links: Vec<usize>,
    solver: SolverConfig,
    neck: NeckConfig,
    hands: HandsConfig,
    hash: String,
}

impl RobotModel {
    /// Loads and validates a model config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ModelError> {
        let config: ModelConfig = toml::from_str(text).map_err(|e| ModelError::Parse(e.to_string()))?;
        let mut model = Self::from_config(config)?;
        model.hash = sha256_hex(text.as_bytes());
        Ok(model)
    }

    pub fn demo() -> Self {
        Self::from_toml_str(DEMO_HUMANOID_TOML).expect("bundled demo model is valid")
    }

    pub fn from_config(config: ModelConfig) -> Result<Self, ModelError> {
        let hash = sha256_hex(
            serde_json::to_string(&config)
                .map_err(|e| ModelError::Parse(e.to_string()))?
                .as_bytes(),
        );
        build_model(config, hash)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// SHA-256 of the config the model was built from.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_names(&self) -> Vec<String> {
        self.joints.iter().map(|j| j.name.clone()).collect()
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.link_index.get(name).copied()
    }

    pub fn root_name(&self) -> &str {
        &self.links[0].name
    }

    pub fn group(&self, link: usize) -> Option<BodyGroup> {
        self.groups[link]
    }

    pub fn mapping(&self) -> &[LinkMapping] {
        &self.mapping
    }

    pub fn rotation_weight(&self, link: usize) -> f64 {
        self.rotation_weights[link]
    }

    pub fn position_weight(&self, link: usize) -> f64 {
        self.position_weights[link]
    }

    /// Robot links carrying a position term in the retargeting objective.
    pub fn position_links(&self) -> &[usize] {
        &self.position_links
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn solver_config_mut(&mut self) -> &mut SolverConfig {
        &mut self.solver
    }

    pub fn neck(&self) -> &NeckConfig {
        &self.neck
    }

    pub fn hands(&self) -> &HandsConfig {
        &self.hands
    }

    /// Joints on the root-to-link path, root first.
    pub fn chain(&self, link: usize) -> &[usize] {
        &self.chains[link]
    }

    pub fn lower_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.lower).collect()
    }

    pub fn upper_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.upper).collect()
    }

    pub fn clamp(&self, q: &mut [f64]) {
        for (v, j) in q.iter_mut().zip(&self.joints) {
            *v = j.clamp(*v);
        }
    }

    pub fn within_limits(&self, q: &[f64], tol: f64) -> bool {
        q.len() == self.joints.len()
            && q.iter()
                .zip(&self.joints)
                .all(|(v, j)| *v >= j.lower - tol && *v <= j.upper + tol)
    }

    fn check_dims(&self, q: &[f64]) -> Result<(), ModelError> {
        if q.len() != self.joints.len() {
            return Err(ModelError::Dimension {
                expected: self.joints.len(),
                got: q.len(),
            });
        }
        Ok(())
    }

    /// World isometry of every link. Link 0 is the root.
    pub fn link_isometries(&self, q: &[f64], root: &Isometry3<f64>) -> Result<Vec<Isometry3<f64>>, ModelError> {
        self.check_dims(q)?;
        let mut out: Vec<Isometry3<f64>> = Vec::with_capacity(self.links.len());
        for link in &self.links {
            let parent = match link.parent {
                Some(p) => out[p] * link.origin,
                None => *root * link.origin,
            };
            let pose = match link.joint {
                Some(j) => {
                    let joint = &self.joints[j];
                    parent * UnitQuaternion::from_axis_angle(&joint.axis, q[j])
                }
                None => parent,
            };
            out.push(pose);
        }
        Ok(out)
    }

    /// World pose of every link; the root link pose equals `root` exactly.
    pub fn forward_kinematics(&self, q: &[f64], root: &LinkPose) -> Result<LinkPoses<'_>, ModelError> {
        let isos = self.link_isometries(q, &root.to_isometry())?;
        let mut poses: Vec<LinkPose> = isos.iter().map(LinkPose::from_isometry).collect();
        poses[0] = *root;
        Ok(LinkPoses { model: self, poses })
    }

    /// Geometric Jacobian of `link`'s origin, 6×n, linear rows first.
    ///
    /// Columns for joints off the root-to-link chain are zero.
    pub fn jacobian(&self, q: &[f64], link: &str) -> Result<DMatrix<f64>, ModelError> {
        let idx = self
            .link_index(link)
            .ok_or_else(|| ModelError::UnknownLink(link.to_string()))?;
        let isos = self.link_isometries(q, &Isometry3::identity())?;
        Ok(self.jacobian_from_isometries(&isos, idx))
    }

    pub(crate) fn jacobian_from_isometries(&self, isos: &[Isometry3<f64>], link: usize) -> DMatrix<f64> {
        let n = self.joints.len();
        let mut jac = DMatrix::zeros(6, n);
        let p = isos[link].translation.vector;
        for &j in &self.chains[link] {
            let joint = &self.joints[j];
            let frame = &isos[joint.link];
            let w = frame.rotation * joint.axis.into_inner();
            let v = w.cross(&(p - frame.translation.vector));
            for r in 0..3 {
                jac[(r, j)] = v[r];
                jac[(r + 3, j)] = w[r];
            }
        }
        jac
    }
}

/// Output of forward kinematics, indexed by link.
#[derive(Debug, Clone)]
pub struct LinkPoses<'a> {
    model: &'a RobotModel,
    poses: Vec<LinkPose>,
}

impl<'a> LinkPoses<'a> {
    pub fn get(&self, name: &str) -> Option<&LinkPose> {
        self.model.link_index(name).map(|i| &self.poses[i])
    }

    pub fn by_index(&self, i: usize) -> &LinkPose {
        &self.poses[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LinkPose)> {
        self.model.links.iter().map(|l| l.name.as_str()).zip(self.poses.iter())
    }

    pub fn into_vec(self) -> Vec<LinkPose> {
        self.poses
    }
}

impl fmt::Display for RobotModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} ({} links, {} joints, {} mapped)",
            self.name,
            self.links.len(),
            self.joints.len(),
            self.mapping.len()
        )
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn invalid(entity: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        entity: entity.into(),
        reason: reason.into(),
    }
}

fn rpy_rotation(rpy: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(rpy[0], rpy[1], rpy[2])
}

fn build_model(config: ModelConfig, hash: String) -> Result<RobotModel, ModelError> {
    if config.links.is_empty() {
        return Err(invalid("links", "model has no links"));
    }

    // Topologically sort links so every parent precedes its children.
    let mut by_name: HashMap<&str, usize> = HashMap::new();
    for (i, l) in config.links.iter().enumerate() {
        if by_name.insert(l.name.as_str(), i).is_some() {
            return Err(invalid(format!("link `{}`", l.name), "duplicate link name"));
        }
    }
    let roots: Vec<&str> = config
        .links
        .iter()
        .filter(|l| l.parent.is_none())
        .map(|l| l.name.as_str())
        .collect();
    if roots.len() != 1 {
        return Err(invalid("links", format!("expected exactly one root link, found {roots:?}")));
    }
    for l in &config.links {
        if let Some(p) = &l.parent {
            if !by_name.contains_key(p.as_str()) {
                return Err(invalid(format!("link `{}`", l.name), format!("unknown parent `{p}`")));
            }
        }
    }
    let root_spec = config.links.iter().find(|l| l.parent.is_none()).expect("one root");
    if root_spec.xyz != [0.0; 3] || root_spec.rpy != [0.0; 3] {
        return Err(invalid(format!("link `{}`", root_spec.name), "the root link origin must be the identity"));
    }
    let mut order: Vec<usize> = Vec::with_capacity(config.links.len());
    let mut placed: HashMap<&str, usize> = HashMap::new();
    while order.len() < config.links.len() {
        let before = order.len();
        for (i, l) in config.links.iter().enumerate() {
            if placed.contains_key(l.name.as_str()) {
                continue;
            }
            let ready = match &l.parent {
                None => true,
                Some(p) => placed.contains_key(p.as_str()),
            };
            if ready {
                placed.insert(l.name.as_str(), order.len());
                order.push(i);
            }
        }
        if order.len() == before {
            let stuck = config
                .links
                .iter()
                .find(|l| !placed.contains_key(l.name.as_str()))
                .map(|l| l.name.clone())
                .unwrap_or_default();
            return Err(invalid(format!("link `{stuck}`"), "link is part of a cycle"));
        }
    }

    let mut links: Vec<Link> = order
        .iter()
        .map(|&i| {
            let l = &config.links[i];
            Link {
                name: l.name.clone(),
                parent: l.parent.as_ref().map(|p| placed[p.as_str()]),
                origin: Isometry3::from_parts(Translation3::from(Vector3::from(l.xyz)), rpy_rotation(l.rpy)),
                joint: None,
            }
        })
        .collect();
    let link_index: HashMap<String, usize> = links.iter().enumerate().map(|(i, l)| (l.name.clone(), i)).collect();

    let mut joints = Vec::with_capacity(config.joints.len());
    let mut joint_names: HashMap<&str, ()> = HashMap::new();
    for (j, spec) in config.joints.iter().enumerate() {
        let entity = format!("joint `{}`", spec.name);
        if joint_names.insert(spec.name.as_str(), ()).is_some() {
            return Err(invalid(entity, "duplicate joint name"));
        }
        if spec.kind != "revolute" {
            return Err(invalid(entity, format!("unsupported joint type `{}`", spec.kind)));
        }
        let axis = Vector3::from(spec.axis);
        if !axis.iter().all(|v| v.is_finite()) || (axis.norm() - 1.0).abs() > AXIS_NORM_TOL {
            return Err(invalid(entity, format!("axis {:?} is not unit length", spec.axis)));
        }
        let [lower, upper] = spec.limits;
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(invalid(entity, format!("limits [{lower}, {upper}] do not satisfy lo < hi")));
        }
        let link = *link_index
            .get(&spec.link)
            .ok_or_else(|| invalid(&entity, format!("unknown link `{}`", spec.link)))?;
        if link == 0 {
            return Err(invalid(entity, "the root link cannot be driven by a joint"));
        }
        if links[link].joint.is_some() {
            return Err(invalid(entity, format!("link `{}` already has a joint", spec.link)));
        }
        links[link].joint = Some(j);
        joints.push(Joint {
            name: spec.name.clone(),
            axis: Unit::new_unchecked(axis),
            lower,
            upper,
            link,
        });
    }

    let mut chains: Vec<Vec<usize>> = Vec::with_capacity(links.len());
    for link in &links {
        let mut chain = link.parent.map(|p| chains[p].clone()).unwrap_or_default();
        if let Some(j) = link.joint {
            chain.push(j);
        }
        chains.push(chain);
    }

    let lookup = |name: &str, what: &str| -> Result<usize, ModelError> {
        link_index
            .get(name)
            .copied()
            .ok_or_else(|| invalid(format!("{what} `{name}`"), "unknown robot link"))
    };

    let mut groups = vec![None; links.len()];
    for name in &config.groups.lower {
        groups[lookup(name, "groups.lower")?] = Some(BodyGroup::Lower);
    }
    for name in &config.groups.upper {
        let i = lookup(name, "groups.upper")?;
        if groups[i].is_some() {
            return Err(invalid(format!("link `{name}`"), "listed in both lower and upper groups"));
        }
        groups[i] = Some(BodyGroup::Upper);
    }

    let mut mapping = Vec::with_capacity(config.mapping.len());
    for m in &config.mapping {
        let link = lookup(&m.robot, "mapping")?;
        if groups[link].is_none() {
            return Err(invalid(
                format!("mapping `{}` -> `{}`", m.human, m.robot),
                "mapped robot link is in neither the lower nor the upper group",
            ));
        }
        if mapping.iter().any(|x: &LinkMapping| x.human == m.human) {
            return Err(invalid(format!("mapping `{}`", m.human), "human link mapped twice"));
        }
        mapping.push(LinkMapping {
            human: m.human.clone(),
            robot: m.robot.clone(),
            link,
            offset: rpy_rotation(m.offset_rpy),
            required: m.required,
        });
    }

    let weights = &config.weights;
    let mut rotation_weights = vec![0.0; links.len()];
    for m in &mapping {
        rotation_weights[m.link] = weights.rotation_default;
    }
    for (name, w) in &weights.rotation {
        rotation_weights[lookup(name, "weights.rotation")?] = *w;
    }
    let mut position_weights = vec![0.0; links.len()];
    for (name, w) in &weights.position {
        position_weights[lookup(name, "weights.position")?] = *w;
    }
    for (i, w) in rotation_weights.iter().chain(position_weights.iter()).enumerate() {
        if !(w.is_finite() && *w >= 0.0) {
            let link = &links[i % links.len()].name;
            return Err(invalid(format!("weight for `{link}`"), format!("weight {w} must be finite and >= 0")));
        }
    }
    let mut position_links: Vec<usize> = (0..links.len())
        .filter(|&i| position_weights[i] > 0.0 && (i != 0 || config.solver.include_pelvis))
        .collect();
    position_links.sort_unstable();
    for &i in &position_links {
        if !mapping.iter().any(|m| m.link == i) {
            return Err(invalid(
                format!("position link `{}`", links[i].name),
                "position-weighted link has no human mapping",
            ));
        }
        if i != 0 && groups[i] != Some(BodyGroup::Lower) {
            return Err(invalid(
                format!("position link `{}`", links[i].name),
                "position terms are only allowed on lower-body links",
            ));
        }
    }

    validate_solver(&config.solver)?;
    validate_neck(&config.neck)?;
    validate_hand("hands.left", &config.hands.left)?;
    validate_hand("hands.right", &config.hands.right)?;

    Ok(RobotModel {
        name: config.name,
        links,
        joints,
        link_index,
        chains,
        groups,
        mapping,
        rotation_weights,
        position_weights,
        position_links,
        solver: config.solver,
        neck: config.neck,
        hands: config.hands,
        hash,
    })
}

fn validate_solver(s: &SolverConfig) -> Result<(), ModelError> {
    let ok = s.lambda_pos.is_finite()
        && s.lambda_pos >= 0.0
        && s.max_iterations > 0
        && s.step_tolerance > 0.0
        && s.decrease_tolerance >= 0.0
        && s.initial_damping > 0.0;
    if ok {
        Ok(())
    } else {
        Err(invalid("solver", "parameters out of range"))
    }
}

fn validate_neck(n: &NeckConfig) -> Result<(), ModelError> {
    for (what, [lo, hi]) in [("neck.yaw_limits", n.yaw_limits), ("neck.pitch_limits", n.pitch_limits)] {
        if !(lo < hi) {
            return Err(invalid(what, format!("limits [{lo}, {hi}] do not satisfy lo < hi")));
        }
    }
    Ok(())
}

fn validate_hand(what: &str, h: &HandSideConfig) -> Result<(), ModelError> {
    let n = h.lower.len();
    if h.upper.len() != n || (!h.joints.is_empty() && h.joints.len() != n) {
        return Err(invalid(what, "joint names and limit vectors must have equal length"));
    }
    if h.lower.iter().zip(&h.upper).any(|(lo, hi)| !(lo < hi)) {
        return Err(invalid(what, "hand limits must satisfy lo < hi"));
    }
    for (mode, poses) in [("power", &h.power), ("pinch", &h.pinch)] {
        for (which, v) in [("open", &poses.open), ("close", &poses.close)] {
            if v.len() != n {
                return Err(invalid(
                    format!("{what}.{mode}.{which}"),
                    format!("expected {n} values, got {}", v.len()),
                ));
            }
            let inside = v
                .iter()
                .zip(h.lower.iter().zip(&h.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi);
            if !inside {
                return Err(invalid(format!("{what}.{mode}.{which}"), "pose outside hand joint limits"));
            }
        }
    }
    Ok(())
}
