//! Whole-body retargeting.
//!
//! Stage 1 aligns link rotations segment by segment in closed form and only
//! seeds the solver. Stage 2 minimizes
//!
//! ```text
//! sum_i w_i^R |R_i^human - R_i^robot(q)|_F^2 + lambda_pos sum_k w_k^p |p_k^human - p_k^robot(q)|^2
//! ```
//!
//! over all mapped links (rotations) and the lower-body position set, with
//! human quantities expressed in the human pelvis frame. The minimizer is a
//! projected Levenberg-Marquardt iteration: each trial step is clamped to the
//! joint limits and only accepted if it lowers the objective.

use nalgebra::{DMatrix, DVector, Isometry3, Matrix3, Rotation3, Unit, Vector3};

use crate::error::RetargetError;
use crate::model::{JointConfig, LinkPose, RobotModel};
use crate::retarget::HumanPoseFrame;

/// Solver targets for one frame, in the human pelvis frame.
#[derive(Debug, Clone)]
pub struct BodyTargets {
    pub rotations: Vec<RotationTarget>,
    pub positions: Vec<PositionTarget>,
}

#[derive(Debug, Clone)]
pub struct RotationTarget {
    pub link: usize,
    pub rotation: Matrix3<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct PositionTarget {
    pub link: usize,
    pub position: Vector3<f64>,
    pub weight: f64,
}

/// Iterates accepted by the solver, starting with the initial guess.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    pub iterates: Vec<Vec<f64>>,
    pub objectives: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BodySolution {
    pub q: JointConfig,
    /// Objective value at `q`.
    pub residual: f64,
    pub iterations: usize,
    /// Set when the solver hit a non-finite objective and fell back to the
    /// last finite iterate.
    pub degraded: bool,
    pub trace: SolveTrace,
}

/// Name of the human link mapped onto the robot root.
pub fn human_pelvis_name(model: &RobotModel) -> &str {
    model
        .mapping()
        .iter()
        .find(|m| m.link == 0)
        .map(|m| m.human.as_str())
        .unwrap_or("Pelvis")
}

impl BodyTargets {
    /// Collects rotation and position targets from `frame`.
    ///
    /// Positions are re-expressed relative to the human pelvis, rotations in
    /// the pelvis frame, so a rigid world translation of the whole frame does
    /// not change the targets.
    pub fn from_frame(model: &RobotModel, frame: &HumanPoseFrame) -> Result<Self, RetargetError> {
        let pelvis_name = human_pelvis_name(model);
        let pelvis = frame
            .get(pelvis_name)
            .ok_or_else(|| RetargetError::MissingLink(pelvis_name.to_string()))?;
        let pelvis_rt = pelvis.rotation.transpose();

        let mut rotations = Vec::new();
        let mut positions = Vec::new();
        for m in model.mapping() {
            let w_rot = model.rotation_weight(m.link);
            let w_pos = if model.position_links().contains(&m.link) {
                model.position_weight(m.link)
            } else {
                0.0
            };
            if w_rot <= 0.0 && w_pos <= 0.0 {
                continue;
            }
            let Some(pose) = frame.get(&m.human) else {
                if m.required {
                    return Err(RetargetError::MissingLink(m.human.clone()));
                }
                continue;
            };
            if w_rot > 0.0 {
                let offset = m.offset.to_rotation_matrix().into_inner();
                rotations.push(RotationTarget {
                    link: m.link,
                    rotation: pelvis_rt * pose.rotation * offset,
                    weight: w_rot,
                });
            }
            if w_pos > 0.0 {
                let rel = pose.position - pelvis.position;
                positions.push(PositionTarget {
                    link: m.link,
                    position: pelvis_rt * rel,
                    weight: model.solver_config().lambda_pos * w_pos,
                });
            }
        }
        rotations.sort_by_key(|t| t.link);
        positions.sort_by_key(|t| t.link);
        Ok(Self { rotations, positions })
    }

    fn residual_rows(&self) -> usize {
        9 * self.rotations.len() + 3 * self.positions.len()
    }
}

/// Per-iteration kinematic quantities in the pelvis frame.
struct Kinematics {
    isos: Vec<Isometry3<f64>>,
    rotations: Vec<Matrix3<f64>>,
    joint_axes: Vec<Vector3<f64>>,
}

impl Kinematics {
    fn new(model: &RobotModel, q: &[f64]) -> Self {
        let isos = model
            .link_isometries(q, &Isometry3::identity())
            .expect("dimension checked by caller");
        let rotations = isos.iter().map(|i| i.rotation.to_rotation_matrix().into_inner()).collect();
        let joint_axes = model
            .joints()
            .iter()
            .map(|j| isos[j.link].rotation * j.axis.into_inner())
            .collect();
        Self {
            isos,
            rotations,
            joint_axes,
        }
    }
}

fn objective_and_residual(targets: &BodyTargets, kin: &Kinematics) -> (f64, DVector<f64>) {
    let mut r = DVector::zeros(targets.residual_rows());
    let mut row = 0;
    for t in &targets.rotations {
        let s = t.weight.sqrt();
        let diff = t.rotation - kin.rotations[t.link];
        for v in diff.iter() {
            r[row] = s * v;
            row += 1;
        }
    }
    for t in &targets.positions {
        let s = t.weight.sqrt();
        let diff = t.position - kin.isos[t.link].translation.vector;
        for v in diff.iter() {
            r[row] = s * v;
            row += 1;
        }
    }
    (r.norm_squared(), r)
}

fn residual_jacobian(model: &RobotModel, targets: &BodyTargets, kin: &Kinematics) -> DMatrix<f64> {
    let n = model.joint_count();
    let mut jac = DMatrix::zeros(targets.residual_rows(), n);
    let mut row = 0;
    for t in &targets.rotations {
        let s = t.weight.sqrt();
        let rot = &kin.rotations[t.link];
        for &j in model.chain(t.link) {
            let d = -s * (kin.joint_axes[j].cross_matrix() * rot);
            for (k, v) in d.iter().enumerate() {
                jac[(row + k, j)] = *v;
            }
        }
        row += 9;
    }
    for t in &targets.positions {
        let s = t.weight.sqrt();
        let p = kin.isos[t.link].translation.vector;
        for &j in model.chain(t.link) {
            let origin = kin.isos[model.joints()[j].link].translation.vector;
            let d = -s * kin.joint_axes[j].cross(&(p - origin));
            for k in 0..3 {
                jac[(row + k, j)] = d[k];
            }
        }
        row += 3;
    }
    jac
}

/// Evaluates the retargeting objective at `q`.
pub fn objective(model: &RobotModel, targets: &BodyTargets, q: &[f64]) -> f64 {
    objective_and_residual(targets, &Kinematics::new(model, q)).0
}

/// Runs stage 2 from `init`.
pub fn solve(model: &RobotModel, targets: &BodyTargets, init: &[f64]) -> BodySolution {
    let cfg = model.solver_config();
    let n = model.joint_count();
    let mut q = init.to_vec();
    model.clamp(&mut q);

    let mut kin = Kinematics::new(model, &q);
    let (mut f, mut r) = objective_and_residual(targets, &kin);
    let mut trace = SolveTrace::default();
    let mut degraded = !f.is_finite();
    trace.iterates.push(q.clone());
    trace.objectives.push(f);

    let mut iterations = 0;
    if !degraded && targets.residual_rows() > 0 {
        let mut jac = residual_jacobian(model, targets, &kin);
        let mut jtj = jac.tr_mul(&jac);
        let mut grad = jac.tr_mul(&r);
        let max_diag = jtj.diagonal().max();
        let mut mu = cfg.initial_damping * if max_diag > 0.0 { max_diag } else { 1.0 };

        while iterations < cfg.max_iterations {
            iterations += 1;
            let mut lhs = jtj.clone();
            let mut rhs = -&grad;
            for i in 0..n {
                lhs[(i, i)] += mu;
            }
            // Joints resting on a limit that the descent direction pushes into stay put.
            let joints = model.joints();
            for i in 0..n {
                let at_lower = q[i] <= joints[i].lower && grad[i] > 0.0;
                let at_upper = q[i] >= joints[i].upper && grad[i] < 0.0;
                if at_lower || at_upper {
                    lhs.row_mut(i).fill(0.0);
                    lhs.column_mut(i).fill(0.0);
                    lhs[(i, i)] = 1.0;
                    rhs[i] = 0.0;
                }
            }
            let Some(chol) = lhs.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let delta = chol.solve(&rhs);
            let mut trial: Vec<f64> = q.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
            model.clamp(&mut trial);
            let step = trial
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            if step < cfg.step_tolerance {
                break;
            }

            let trial_kin = Kinematics::new(model, &trial);
            let (f_trial, r_trial) = objective_and_residual(targets, &trial_kin);
            if !f_trial.is_finite() {
                degraded = true;
                break;
            }
            if f_trial < f {
                let decrease = f - f_trial;
                q = trial;
                kin = trial_kin;
                f = f_trial;
                r = r_trial;
                trace.iterates.push(q.clone());
                trace.objectives.push(f);
                if decrease < cfg.decrease_tolerance {
                    break;
                }
                jac = residual_jacobian(model, targets, &kin);
                jtj = jac.tr_mul(&jac);
                grad = jac.tr_mul(&r);
                mu = (mu / 3.0).max(1e-15);
            } else {
                mu *= 4.0;
            }
        }
    }

    BodySolution {
        q: JointConfig::new(q),
        residual: f,
        iterations,
        degraded,
        trace,
    }
}

/// Closed-form per-segment rotation alignment used to seed stage 2.
///
/// Every rotation target defines a segment: the joints between it and its
/// nearest targeted ancestor. Segments of one to three joints are solved
/// exactly; longer ones fix the leading joints at their clamped zero and solve
/// the last three. Joints outside every segment stay at clamped zero.
pub fn stage1(model: &RobotModel, targets: &BodyTargets) -> Vec<f64> {
    let mut q = vec![0.0; model.joint_count()];
    model.clamp(&mut q);

    let mut target_of: Vec<Option<Matrix3<f64>>> = vec![None; model.links().len()];
    for t in &targets.rotations {
        target_of[t.link] = Some(t.rotation);
    }

    for t in &targets.rotations {
        if t.link == 0 {
            continue;
        }
        // Walk up to the nearest ancestor with a target.
        let mut path = vec![t.link];
        let mut cursor = model.links()[t.link].parent;
        let ancestor_rot = loop {
            match cursor {
                Some(a) => {
                    if let Some(r) = target_of[a] {
                        break r;
                    }
                    path.push(a);
                    cursor = model.links()[a].parent;
                }
                None => break Matrix3::identity(),
            }
        };
        if cursor.is_none() {
            // The root itself sits at the identity in the pelvis frame.
            path.pop();
        }
        path.reverse();

        let mut fixed: Vec<Matrix3<f64>> = Vec::new();
        let mut axes: Vec<(usize, Vector3<f64>)> = Vec::new();
        let mut acc = Matrix3::identity();
        for &l in &path {
            let link = &model.links()[l];
            acc *= link.origin.rotation.to_rotation_matrix().into_inner();
            if let Some(j) = link.joint {
                fixed.push(acc);
                axes.push((j, model.joints()[j].axis.into_inner()));
                acc = Matrix3::identity();
            }
        }
        fixed.push(acc);
        if axes.is_empty() {
            continue;
        }

        // M = G0 Rot(a1) G1 ... Rot(ak) Gk  =>  C^T M = Rot(b1) ... Rot(bk)
        let k = axes.len();
        let mut tail = Matrix3::identity();
        let mut b = vec![Vector3::zeros(); k];
        for i in (0..k).rev() {
            tail = fixed[i + 1] * tail;
            b[i] = tail.transpose() * axes[i].1;
        }
        let total = fixed[0] * tail;
        let mut m = total.transpose() * ancestor_rot.transpose() * t.rotation;

        let joints: Vec<usize> = axes.iter().map(|(j, _)| *j).collect();
        let lead = k.saturating_sub(3);
        for i in 0..lead {
            m = rot(&b[i], q[joints[i]]).transpose() * m;
        }
        let solved = match k - lead {
            1 => vec![fit_single(&b[lead], &m)],
            2 => solve_two(&b[lead], &b[lead + 1], &m).to_vec(),
            _ => {
                let limits: Vec<(f64, f64)> = joints[lead..]
                    .iter()
                    .map(|&j| (model.joints()[j].lower, model.joints()[j].upper))
                    .collect();
                solve_three(&b[lead], &b[lead + 1], &b[lead + 2], &m, &limits).to_vec()
            }
        };
        for (offset, value) in solved.into_iter().enumerate() {
            let j = joints[lead + offset];
            q[j] = model.joints()[j].clamp(value);
        }
    }
    q
}

fn rot(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).into_inner()
}

/// Angle about `b` whose rotation is closest to `m` in the Frobenius norm.
fn fit_single(b: &Vector3<f64>, m: &Matrix3<f64>) -> f64 {
    let w = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let along = (b.transpose() * m * b)[0];
    let y = b.dot(&w);
    let x = m.trace() - along;
    if x.abs() < 1e-14 && y.abs() < 1e-14 {
        0.0
    } else {
        y.atan2(x)
    }
}

/// Angle about `b` carrying `u` as close as possible to `v`.
fn rotate_onto(b: &Vector3<f64>, u: &Vector3<f64>, v: &Vector3<f64>) -> Option<f64> {
    let up = u - b * b.dot(u);
    let vp = v - b * b.dot(v);
    if up.norm() < 1e-9 || vp.norm() < 1e-9 {
        return None;
    }
    Some(b.dot(&up.cross(&vp)).atan2(up.dot(&vp)))
}

fn solve_two(b1: &Vector3<f64>, b2: &Vector3<f64>, m: &Matrix3<f64>) -> [f64; 2] {
    match rotate_onto(b1, b2, &(m * b2)) {
        Some(q1) => {
            let q2 = fit_single(b2, &(rot(b1, q1).transpose() * m));
            [q1, q2]
        }
        None => [fit_single(b1, m), 0.0],
    }
}

fn solve_three(
    b1: &Vector3<f64>,
    b2: &Vector3<f64>,
    b3: &Vector3<f64>,
    m: &Matrix3<f64>,
    limits: &[(f64, f64)],
) -> [f64; 3] {
    // b1 . (M b3) = b1 . Rot(b2, q2) b3 fixes q2 up to two branches.
    let a = b1.dot(b3);
    let bb = b1.dot(&b2.cross(b3));
    let c = b2.dot(b3) * b1.dot(b2);
    let d = b1.dot(&(m * b3));
    let rho = ((a - c).powi(2) + bb * bb).sqrt();
    if rho < 1e-9 {
        let q2 = 0.0_f64.clamp(limits[1].0, limits[1].1);
        let rest = solve_two(b1, b3, m);
        let m2 = rot(b1, rest[0]) * rot(b2, q2);
        let q3 = fit_single(b3, &(m2.transpose() * m));
        return [rest[0], q2, q3];
    }
    let phi = bb.atan2(a - c);
    let delta = ((d - c) / rho).clamp(-1.0, 1.0).acos();

    let mut best: Option<([f64; 3], f64, f64)> = None;
    for q2 in [phi + delta, phi - delta] {
        let q2 = wrap(q2);
        let u = rot(b2, q2) * b3;
        let q1 = rotate_onto(b1, &u, &(m * b3)).unwrap_or(0.0);
        let partial = rot(b1, q1) * rot(b2, q2);
        let q3 = fit_single(b3, &(partial.transpose() * m));
        let cand = [q1, q2, q3];
        let violation: f64 = cand
            .iter()
            .zip(limits)
            .map(|(q, (lo, hi))| (lo - q).max(0.0) + (q - hi).max(0.0))
            .sum();
        let err = (partial * rot(b3, q3) - m).norm();
        let better = match &best {
            None => true,
            Some((_, bv, be)) => {
                if (violation - bv).abs() > 1e-9 {
                    violation < *bv
                } else {
                    err < *be
                }
            }
        };
        if better {
            best = Some((cand, violation, err));
        }
    }
    best.map(|b| b.0).unwrap_or([0.0; 3])
}

fn wrap(angle: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = angle % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a <= -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Solves for the body joints of one frame.
///
/// Without a warm start the closed-form stage-1 guess seeds the solver.
pub fn retarget_body(
    model: &RobotModel,
    frame: &HumanPoseFrame,
    warm_start: Option<&JointConfig>,
) -> Result<BodySolution, RetargetError> {
    if let Some(ws) = warm_start {
        if ws.len() != model.joint_count() {
            return Err(RetargetError::WarmStartDimension {
                expected: model.joint_count(),
                got: ws.len(),
            });
        }
    }
    let targets = BodyTargets::from_frame(model, frame)?;
    let init = match warm_start {
        Some(ws) => ws.to_vec(),
        None => stage1(model, &targets),
    };
    Ok(solve(model, &targets, &init))
}

/// Builds a human frame whose mapped links coincide with the robot's links
/// at `q` and `root`. Used for self-retargeting checks and synthetic motion.
pub fn frame_from_robot(model: &RobotModel, q: &[f64], root: &LinkPose, timestamp: u64) -> HumanPoseFrame {
    let fk = model
        .forward_kinematics(q, root)
        .expect("joint vector matches model");
    let mut frame = HumanPoseFrame::new(timestamp);
    for m in model.mapping() {
        let pose = fk.by_index(m.link);
        let offset_inv = m.offset.inverse().to_rotation_matrix().into_inner();
        frame.insert(&m.human, LinkPose::new(pose.rotation * offset_inv, pose.position));
    }
    frame
}
