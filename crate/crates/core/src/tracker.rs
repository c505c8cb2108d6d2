//! Kinematic stand-in for the low-level tracking controller.
//!
//! Joints are single-dof inertias driven by a PD law toward the commanded
//! targets and integrated with semi-implicit Euler at a fixed substep rate.
//! The root integrates the commanded heading-frame velocities and yaw rate;
//! height, roll and pitch follow their commands through a first-order lag.

use serde::{Deserialize, Serialize};

use crate::command::{wrap_angle, CommandLayout, CommandVector, ProprioState};
use crate::error::SimError;
use crate::model::{JointConfig, LinkPose, RobotModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// kg·m², every joint.
    pub inertia: f64,
    /// N·m/rad.
    pub kp: f64,
    /// N·m·s/rad; critical damping when absent.
    pub kd: Option<f64>,
    pub substep_hz: f64,
    /// Time constant of the root height/roll/pitch lag, s.
    pub root_time_constant: f64,
    /// Track the target's finite-difference velocity in addition to its position.
    pub feedforward: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            inertia: 0.1,
            kp: 100.0,
            kd: None,
            substep_hz: 500.0,
            root_time_constant: 0.1,
            feedforward: true,
        }
    }
}

impl TrackerConfig {
    pub fn damping(&self) -> f64 {
        self.kd.unwrap_or_else(|| 2.0 * (self.kp * self.inertia).sqrt())
    }
}

/// Floating-base pose and the velocities applied over the last step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RootState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
    pub vx: f64,
    pub vy: f64,
    pub yaw_rate: f64,
}

impl RootState {
    pub fn pose(&self) -> LinkPose {
        let rot = nalgebra::Rotation3::from_euler_angles(self.roll, self.pitch, self.yaw);
        LinkPose::new(*rot.matrix(), nalgebra::Vector3::new(self.x, self.y, self.z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    /// Body, neck, then hand joints, in command layout order.
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    pub root: RootState,
    /// Seconds.
    pub time: f64,
    /// Joint targets of the previous command.
    prev_target: Option<Vec<f64>>,
}

impl SimState {
    pub fn zeros(joints: usize) -> Self {
        Self {
            q: vec![0.0; joints],
            dq: vec![0.0; joints],
            root: RootState::default(),
            time: 0.0,
            prev_target: None,
        }
    }

    pub fn timestamp_ns(&self) -> u64 {
        (self.time * 1e9).round().max(0.0) as u64
    }

    /// Drops the target history, so the next step is a plain PD step.
    pub fn forget_history(&mut self) {
        self.prev_target = None;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingMetric {
    pub r_track: f64,
    pub alpha: f64,
    pub error_norm: f64,
}

/// `exp(-alpha * |cmd - achieved|)` over flattened vectors.
pub fn tracking_metric(cmd: &[f64], achieved: &[f64], alpha: f64) -> Result<TrackingMetric, SimError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(SimError::InvalidAlpha(alpha));
    }
    if cmd.len() != achieved.len() {
        return Err(SimError::Dimension {
            expected: cmd.len(),
            got: achieved.len(),
        });
    }
    let error_norm = cmd.iter().zip(achieved).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(TrackingMetric {
        r_track: (-alpha * error_norm).exp(),
        alpha,
        error_norm,
    })
}

#[derive(Debug, Clone)]
pub struct Simulator {
    layout: CommandLayout,
    kp: Vec<f64>,
    kd: Vec<f64>,
    inertia: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    substep: f64,
    root_tau: f64,
    feedforward: bool,
}

impl Simulator {
    /// A simulator over every actuated joint of `model` (body, neck, hands).
    pub fn new(model: &RobotModel, config: &TrackerConfig) -> Self {
        let layout = CommandLayout::from_model(model);
        let neck = model.neck();
        let hands = model.hands();
        let mut lower = model.lower_limits();
        let mut upper = model.upper_limits();
        lower.extend([neck.yaw_limits[0], neck.pitch_limits[0]]);
        upper.extend([neck.yaw_limits[1], neck.pitch_limits[1]]);
        lower.extend(hands.left.lower.iter().chain(&hands.right.lower));
        upper.extend(hands.left.upper.iter().chain(&hands.right.upper));
        Self::with_limits(layout, lower, upper, config)
    }

    pub fn with_limits(layout: CommandLayout, lower: Vec<f64>, upper: Vec<f64>, config: &TrackerConfig) -> Self {
        let n = layout.actuated_dof();
        assert_eq!(lower.len(), n, "lower limit count");
        assert_eq!(upper.len(), n, "upper limit count");
        assert!(config.kp > 0.0 && config.inertia > 0.0 && config.damping() > 0.0, "gains must be positive");
        assert!(config.substep_hz > 0.0 && config.root_time_constant > 0.0);
        Self {
            layout,
            kp: vec![config.kp; n],
            kd: vec![config.damping(); n],
            inertia: vec![config.inertia; n],
            lower,
            upper,
            substep: 1.0 / config.substep_hz,
            root_tau: config.root_time_constant,
            feedforward: config.feedforward,
        }
    }

    pub fn layout(&self) -> &CommandLayout {
        &self.layout
    }

    pub fn joint_count(&self) -> usize {
        self.kp.len()
    }

    pub fn initial_state(&self) -> SimState {
        let mut state = SimState::zeros(self.joint_count());
        self.clamp(&mut state.q, &mut state.dq);
        state
    }

    /// A resting state that already matches `cmd`.
    pub fn state_at(&self, cmd: &CommandVector) -> Result<SimState, SimError> {
        let target = self.targets(cmd)?;
        let mut state = SimState::zeros(self.joint_count());
        state.q = target;
        self.clamp(&mut state.q, &mut state.dq);
        state.root.z = cmd.z;
        state.root.roll = cmd.roll;
        state.root.pitch = cmd.pitch;
        state.time = cmd.timestamp as f64 * 1e-9;
        Ok(state)
    }

    fn targets(&self, cmd: &CommandVector) -> Result<Vec<f64>, SimError> {
        let flat = cmd.flatten(&self.layout).map_err(|_| SimError::Dimension {
            expected: self.layout.body_dof(),
            got: cmd.q_ref.len(),
        })?;
        Ok(flat[6..].to_vec())
    }

    fn clamp(&self, q: &mut [f64], dq: &mut [f64]) {
        for i in 0..q.len() {
            if q[i] < self.lower[i] {
                q[i] = self.lower[i];
                dq[i] = 0.0;
            } else if q[i] > self.upper[i] {
                q[i] = self.upper[i];
                dq[i] = 0.0;
            }
        }
    }

    /// `K_P (q_tgt - q) - K_D dq`, elementwise.
    pub fn pd_torque(&self, state: &SimState, q_tgt: &[f64]) -> Result<Vec<f64>, SimError> {
        let n = self.joint_count();
        for len in [q_tgt.len(), state.q.len(), state.dq.len()] {
            if len != n {
                return Err(SimError::Dimension { expected: n, got: len });
            }
        }
        Ok(pd_torque(&self.kp, &self.kd, &state.q, &state.dq, q_tgt))
    }

    /// Advances `state` by `dt` seconds under `cmd`.
    pub fn step(&self, state: &SimState, cmd: &CommandVector, dt: f64) -> Result<SimState, SimError> {
        if !(dt > 0.0 && dt <= 0.1) {
            return Err(SimError::InvalidStep(dt));
        }
        let n = self.joint_count();
        if state.q.len() != n || state.dq.len() != n {
            return Err(SimError::Dimension {
                expected: n,
                got: state.q.len(),
            });
        }
        let target = self.targets(cmd)?;
        let velocity: Option<Vec<f64>> = match (&state.prev_target, self.feedforward) {
            (Some(prev), true) => Some(target.iter().zip(prev).map(|(t, p)| (t - p) / dt).collect()),
            _ => None,
        };

        let mut next = state.clone();
        let substeps = (dt / self.substep).round().max(1.0) as usize;
        let h = dt / substeps as f64;
        let mut q_des = target.clone();
        for k in 0..substeps {
            let tau = match &velocity {
                None => pd_torque(&self.kp, &self.kd, &next.q, &next.dq, &target),
                Some(v) => {
                    let s = k as f64 * h;
                    for i in 0..n {
                        q_des[i] = (target[i] + v[i] * s).clamp(self.lower[i], self.upper[i]);
                    }
                    (0..n)
                        .map(|i| self.kp[i] * (q_des[i] - next.q[i]) + self.kd[i] * (v[i] - next.dq[i]))
                        .collect()
                }
            };
            for i in 0..n {
                next.dq[i] += tau[i] / self.inertia[i] * h;
                next.q[i] += next.dq[i] * h;
            }
            self.clamp(&mut next.q, &mut next.dq);
        }

        let root = &mut next.root;
        let (s, c) = root.yaw.sin_cos();
        root.x += (c * cmd.vx - s * cmd.vy) * dt;
        root.y += (s * cmd.vx + c * cmd.vy) * dt;
        root.yaw = wrap_angle(root.yaw + cmd.yaw_rate * dt);
        root.vx = cmd.vx;
        root.vy = cmd.vy;
        root.yaw_rate = cmd.yaw_rate;
        let gain = 1.0 - (-dt / self.root_tau).exp();
        root.z += (cmd.z - root.z) * gain;
        root.roll += (cmd.roll - root.roll) * gain;
        root.pitch += (cmd.pitch - root.pitch) * gain;

        next.time = state.time + dt;
        next.prev_target = Some(target);
        Ok(next)
    }

    /// The state expressed in command layout, for comparison against commands.
    pub fn achieved(&self, state: &SimState) -> CommandVector {
        let body = self.layout.body_range();
        let neck = self.layout.neck_range();
        let left = self.layout.left_hand_range();
        let right = self.layout.right_hand_range();
        let off = |r: std::ops::Range<usize>| (r.start - 6)..(r.end - 6);
        CommandVector {
            vx: state.root.vx,
            vy: state.root.vy,
            z: state.root.z,
            roll: state.root.roll,
            pitch: state.root.pitch,
            yaw_rate: state.root.yaw_rate,
            q_ref: JointConfig::new(state.q[off(body)].to_vec()),
            neck: crate::retarget::NeckTarget {
                yaw: state.q[neck.start - 6],
                pitch: state.q[neck.start - 5],
            },
            hands: crate::retarget::HandTargets {
                left: state.q[off(left)].to_vec(),
                right: state.q[off(right)].to_vec(),
            },
            timestamp: state.timestamp_ns(),
        }
    }

    /// Proprioceptive view of `state`. Only the yaw rate contributes to the
    /// root angular velocity, since roll and pitch follow a first-order lag.
    pub fn proprio(&self, state: &SimState) -> ProprioState {
        let r = &state.root;
        ProprioState {
            root_orientation: nalgebra::UnitQuaternion::from_euler_angles(r.roll, r.pitch, r.yaw),
            root_angular_velocity: nalgebra::Vector3::new(0.0, 0.0, r.yaw_rate),
            q: JointConfig::new(state.q.clone()),
            dq: state.dq.clone(),
            timestamp: state.timestamp_ns(),
        }
    }

    /// Scores `cmd` against the state that was current when it arrived.
    pub fn track(&self, state: &SimState, cmd: &CommandVector, alpha: f64) -> Result<TrackingMetric, SimError> {
        let dim_err = |_| SimError::Dimension {
            expected: self.layout.body_dof(),
            got: cmd.q_ref.len(),
        };
        let c = cmd.flatten(&self.layout).map_err(dim_err)?;
        let a = self.achieved(state).flatten(&self.layout).map_err(dim_err)?;
        tracking_metric(&c, &a, alpha)
    }
}

fn pd_torque(kp: &[f64], kd: &[f64], q: &[f64], dq: &[f64], q_tgt: &[f64]) -> Vec<f64> {
    (0..q.len()).map(|i| kp[i] * (q_tgt[i] - q[i]) - kd[i] * dq[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingSummary {
    pub mean: f64,
    pub min: f64,
    pub count: usize,
}

/// Plays `commands` through `sim` at their timestamp spacing (or `default_dt`
/// where timestamps do not advance) and averages r_track.
pub fn replay_tracking(
    sim: &Simulator,
    commands: &[CommandVector],
    default_dt: f64,
    alpha: f64,
) -> Result<TrackingSummary, SimError> {
    let Some(first) = commands.first() else {
        return Ok(TrackingSummary {
            mean: 1.0,
            min: 1.0,
            count: 0,
        });
    };
    let mut state = sim.state_at(first)?;
    let (mut sum, mut min) = (0.0, 1.0f64);
    for (k, cmd) in commands.iter().enumerate() {
        let m = sim.track(&state, cmd, alpha)?;
        sum += m.r_track;
        min = min.min(m.r_track);
        let dt = match commands.get(k + 1) {
            Some(next) if next.timestamp > cmd.timestamp => ((next.timestamp - cmd.timestamp) as f64 * 1e-9).min(0.1),
            _ => default_dt,
        };
        state = sim.step(&state, cmd, dt)?;
    }
    Ok(TrackingSummary {
        mean: sum / commands.len() as f64,
        min,
        count: commands.len(),
    })
}
