//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is printed even when
//! output capture is on. Pass substrings as arguments to run a subset, e.g.
//! `cargo test --test acceptance -- neck pd`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::panic::{self, AssertUnwindSafe};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tw2_bus::inference::{EchoPolicyConfig, EchoPolicyServer};
use tw2_bus::runner::{run_policy, RunnerConfig};
use tw2_bus::wire::{Handshake, MsgType};
use tw2_bus::{Broker, BrokerConfig, BusClient, CtrlEvent, Session};
use tw2_cli::config::{PipelineConfig, SourceConfig};
use tw2_cli::teleop::run_teleop;
use tw2_core::command::{CommandDeriver, PoseSample};
use tw2_core::config::{GroupsSpec, JointSpec, LinkSpec, MappingSpec, ModelConfig, NeckConfig, WeightsSpec};
use tw2_core::episode::{filter_idle, segment, Episode, EpisodeHeader, Mark, MarkKind, Rates};
use tw2_core::motion::{gen_synthetic_motion, MotionKind};
use tw2_core::retarget::body::{frame_from_robot, retarget_body, BodyTargets};
use tw2_core::retarget::neck::neck_from_rotations;
use tw2_core::tracker::{replay_tracking, SimState, Simulator, TrackerConfig};
use tw2_core::{
    CommandLayout, CommandVector, GraspCommand, GraspMode, HumanPoseFrame, LinkPose, NormalizationStats,
    ProprioState, Retargeter, RobotModel,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn random_q(model: &RobotModel, rng: &mut ChaCha8Rng) -> Vec<f64> {
    model.joints().iter().map(|j| rng.random_range(j.lower..j.upper)).collect()
}

fn random_pose(rng: &mut ChaCha8Rng) -> LinkPose {
    let r = UnitQuaternion::from_euler_angles(
        rng.random_range(-PI..PI),
        rng.random_range(-1.5..1.5),
        rng.random_range(-PI..PI),
    );
    let p = Vector3::new(
        rng.random_range(-3.0..3.0),
        rng.random_range(-3.0..3.0),
        rng.random_range(0.0..1.5),
    );
    LinkPose::new(r.to_rotation_matrix().into_inner(), p)
}

fn self_retargeting() -> Outcome {
    let model = RobotModel::demo();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let (mut worst_q, mut worst_residual) = (0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let q0 = random_q(&model, &mut rng);
        let frame = frame_from_robot(&model, &q0, &random_pose(&mut rng), 0);
        let sol = retarget_body(&model, &frame, None).expect("complete frame");
        let err = sol
            .q
            .as_slice()
            .iter()
            .zip(&q0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst_q = worst_q.max(err);
        worst_residual = worst_residual.max(sol.residual);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_q <= 1e-4 && worst_residual < 1e-8 && secs < 30.0,
        format!("100 configs, max joint error {worst_q:.2e} rad, max residual {worst_residual:.2e}, {secs:.2} s"),
    )
}

/// Rounds to a multiple of 2^-30 so that adding a dyadic offset is exact.
fn quantize(v: f64) -> f64 {
    (v * (1u64 << 30) as f64).round() / (1u64 << 30) as f64
}

fn teleport_invariance() -> Outcome {
    let model = RobotModel::demo();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut identical = 0;
    let mut iterates = 0;
    for _ in 0..20 {
        let q0 = random_q(&model, &mut rng);
        let raw = frame_from_robot(&model, &q0, &random_pose(&mut rng), 0);
        // Perturbed so the frame is not exactly reachable and the solver iterates.
        let mut frame = HumanPoseFrame::new(0);
        for m in model.mapping() {
            let p = raw.get(&m.human).expect("mapped link");
            let tilt = UnitQuaternion::from_euler_angles(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
            let noise = Vector3::from_fn(|_, _| rng.random_range(-0.03..0.03));
            frame.insert(
                &m.human,
                LinkPose::new(p.rotation * tilt.to_rotation_matrix().into_inner(), (p.position + noise).map(quantize)),
            );
        }
        let shift = Vector3::from_fn(|_, _| rng.random_range(-(1i64 << 36)..(1i64 << 36)) as f64 / (1u64 << 30) as f64);
        let moved = frame.translated(&shift);
        let a = retarget_body(&model, &frame, None).unwrap();
        let b = retarget_body(&model, &moved, None).unwrap();
        iterates += a.trace.iterates.len();
        if a.trace == b.trace && a.q == b.q && a.residual.to_bits() == b.residual.to_bits() {
            identical += 1;
        }
    }
    outcome(
        identical == 20,
        format!("{identical}/20 trials with bit-identical iterates ({iterates} iterates compared)"),
    )
}

const LENGTHS: [f64; 3] = [0.5, 0.4, 0.3];
const LIMIT: f64 = 1.2;

fn planar_model() -> RobotModel {
    let mut position = BTreeMap::new();
    position.insert("tip".to_string(), 1.0);
    let config = ModelConfig {
        name: "planar3".into(),
        links: vec![
            LinkSpec::root("base"),
            LinkSpec::child("l1", "base", [0.0; 3]),
            LinkSpec::child("l2", "l1", [LENGTHS[0], 0.0, 0.0]),
            LinkSpec::child("l3", "l2", [LENGTHS[1], 0.0, 0.0]),
            LinkSpec::child("tip", "l3", [LENGTHS[2], 0.0, 0.0]),
        ],
        joints: ["l1", "l2", "l3"]
            .iter()
            .enumerate()
            .map(|(i, l)| JointSpec::revolute(&format!("j{i}"), l, [0.0, 0.0, 1.0], [-LIMIT, LIMIT]))
            .collect(),
        mapping: vec![
            MappingSpec {
                human: "Pelvis".into(),
                robot: "base".into(),
                offset_rpy: [0.0; 3],
                required: true,
            },
            MappingSpec {
                human: "Hand".into(),
                robot: "tip".into(),
                offset_rpy: [0.0; 3],
                required: true,
            },
        ],
        groups: GroupsSpec {
            lower: vec!["base".into(), "tip".into()],
            upper: vec![],
        },
        weights: WeightsSpec {
            position,
            ..WeightsSpec::default()
        },
        ..ModelConfig::default()
    };
    RobotModel::from_config(config).expect("planar model")
}

/// Objective of the planar chain written out by hand: the Frobenius distance
/// between z-rotations is 4(1 - cos(Δθ)), plus the squared tip distance.
fn planar_objective(target: (f64, f64, f64), q: [f64; 3]) -> f64 {
    let (a1, a2, a3) = (q[0], q[0] + q[1], q[0] + q[1] + q[2]);
    let x = LENGTHS[0] * a1.cos() + LENGTHS[1] * a2.cos() + LENGTHS[2] * a3.cos();
    let y = LENGTHS[0] * a1.sin() + LENGTHS[1] * a2.sin() + LENGTHS[2] * a3.sin();
    4.0 * (1.0 - (target.2 - a3).cos()) + (target.0 - x).powi(2) + (target.1 - y).powi(2)
}

fn grid_minimum(target: (f64, f64, f64)) -> f64 {
    let n = (2.0 * LIMIT / 0.01).round() as usize + 1;
    // Sums of grid angles lie on the same 0.01 rad grid, so trig is tabulated once.
    let table = |m: usize, base: f64| -> Vec<(f64, f64)> {
        (0..m).map(|k| base + 0.01 * k as f64).map(|a| (a.cos(), a.sin())).collect()
    };
    let one = table(n, -LIMIT);
    let two = table(2 * n - 1, -2.0 * LIMIT);
    let three = table(3 * n - 2, -3.0 * LIMIT);
    let rot: Vec<f64> = (0..3 * n - 2)
        .map(|k| 4.0 * (1.0 - (target.2 - (-3.0 * LIMIT + 0.01 * k as f64)).cos()))
        .collect();
    let mut best = f64::INFINITY;
    for i in 0..n {
        let (x1, y1) = (LENGTHS[0] * one[i].0, LENGTHS[0] * one[i].1);
        for j in 0..n {
            let (x2, y2) = (x1 + LENGTHS[1] * two[i + j].0, y1 + LENGTHS[1] * two[i + j].1);
            for k in 0..n {
                let s = i + j + k;
                let dx = target.0 - x2 - LENGTHS[2] * three[s].0;
                let dy = target.1 - y2 - LENGTHS[2] * three[s].1;
                let f = rot[s] + dx * dx + dy * dy;
                if f < best {
                    best = f;
                }
            }
        }
    }
    best
}

fn grid_search_oracle() -> Outcome {
    let model = planar_model();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_agreement = 0.0_f64;
    let mut ok = 0;
    for _ in 0..20 {
        // A perturbed reachable pose: the optimum is small but not zero.
        let q0: [f64; 3] = std::array::from_fn(|_| rng.random_range(-LIMIT..LIMIT));
        let (a1, a2, a3) = (q0[0], q0[0] + q0[1], q0[0] + q0[1] + q0[2]);
        let target = (
            LENGTHS[0] * a1.cos() + LENGTHS[1] * a2.cos() + LENGTHS[2] * a3.cos() + rng.random_range(-0.1..0.1),
            LENGTHS[0] * a1.sin() + LENGTHS[1] * a2.sin() + LENGTHS[2] * a3.sin() + rng.random_range(-0.1..0.1),
            a3 + rng.random_range(-0.2..0.2),
        );
        let mut frame = HumanPoseFrame::new(0);
        frame.insert("Pelvis", LinkPose::identity());
        let rz = UnitQuaternion::from_euler_angles(0.0, 0.0, target.2).to_rotation_matrix().into_inner();
        frame.insert("Hand", LinkPose::new(rz, Vector3::new(target.0, target.1, 0.0)));
        let sol = retarget_body(&model, &frame, None).unwrap();
        let q = sol.q.as_slice();
        let f_solver = planar_objective(target, [q[0], q[1], q[2]]);
        let targets = BodyTargets::from_frame(&model, &frame).unwrap();
        let f_library = tw2_core::retarget::body::objective(&model, &targets, q);
        worst_agreement = worst_agreement.max((f_solver - f_library).abs());
        let gap = f_solver - grid_minimum(target);
        worst_gap = worst_gap.max(gap);
        if gap <= 1e-6 {
            ok += 1;
        }
    }
    outcome(
        ok == 20 && worst_agreement < 1e-12,
        format!(
            "{ok}/20 targets within 1e-6 of the grid minimum (worst solver - grid {worst_gap:.2e}), objective agreement {worst_agreement:.1e}"
        ),
    )
}

fn rz(a: f64) -> Matrix3<f64> {
    Matrix3::new(a.cos(), -a.sin(), 0.0, a.sin(), a.cos(), 0.0, 0.0, 0.0, 1.0)
}

fn ry(a: f64) -> Matrix3<f64> {
    Matrix3::new(a.cos(), 0.0, a.sin(), 0.0, 1.0, 0.0, -a.sin(), 0.0, a.cos())
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

fn neck_round_trip() -> Outcome {
    let limits = NeckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0_f64;
    let mut points = 0;
    for i in 0..100 {
        let yaw = -PI + (i as f64 + 0.5) * 2.0 * PI / 100.0;
        for j in 0..100 {
            let pitch = -1.55 + j as f64 * 3.10 / 99.0;
            let spine = random_pose(&mut rng).rotation;
            let head = spine * rz(yaw) * ry(pitch);
            let sol = neck_from_rotations(&head, &spine, &limits);
            let err = wrap(sol.target.yaw - yaw).abs().max((sol.target.pitch - pitch).abs());
            worst = worst.max(err);
            points += 1;
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{points} grid points, max angle error {worst:.2e} rad"),
    )
}

fn one_joint(config: &TrackerConfig) -> Simulator {
    let layout = CommandLayout::new(vec!["j".into()], vec![], vec![]);
    Simulator::with_limits(layout, vec![-10.0; 3], vec![10.0; 3], config)
}

fn pd_tracking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut exact = 0;
    for _ in 0..1000 {
        let kp = rng.random_range(1.0..500.0);
        let kd = rng.random_range(0.1..50.0);
        let sim = one_joint(&TrackerConfig {
            kp,
            kd: Some(kd),
            ..TrackerConfig::default()
        });
        let mut state = sim.initial_state();
        state.q = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        state.dq = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let tgt: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tau = sim.pd_torque(&state, &tgt).unwrap();
        let expected: Vec<f64> = (0..3).map(|i| kp * (tgt[i] - state.q[i]) - kd * state.dq[i]).collect();
        if tau.iter().zip(&expected).all(|(a, b)| a.to_bits() == b.to_bits()) {
            exact += 1;
        }
    }

    let sim = one_joint(&TrackerConfig {
        feedforward: false,
        ..TrackerConfig::default()
    });
    let mut cmd = CommandVector::zeros(sim.layout());
    cmd.q_ref = tw2_core::JointConfig::new(vec![1.0]);
    let mut state: SimState = sim.initial_state();
    let dt = 0.01;
    let mut peak = f64::MIN;
    let mut last_outside = 0.0;
    for k in 1..=300 {
        state = sim.step(&state, &cmd, dt).unwrap();
        peak = peak.max(state.q[0]);
        if (state.q[0] - 1.0).abs() >= 0.01 {
            last_outside = k as f64 * dt;
        }
    }
    let overshoot = (peak - 1.0).max(0.0);
    outcome(
        exact == 1000 && last_outside <= 1.0 && overshoot < 0.01,
        format!(
            "torque bit-exact in {exact}/1000 cases; unit step settles into the 1% band at {last_outside:.2} s, overshoot {:.3}%",
            overshoot * 100.0
        ),
    )
}

fn end_to_end_delay() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig {
        duration_s: 60.0,
        record: Some(dir.path().join("e2e.tw2e")),
        source: SourceConfig::Synthetic {
            motion: MotionKind::Walk,
            seed: 7,
        },
        ..PipelineConfig::default()
    };
    cfg.ports.bus = 0;
    let r = match run_teleop(&cfg, &AtomicBool::new(false), &AtomicBool::new(false)) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline error: {e}")),
    };
    let episode_ok = Episode::read(dir.path().join("e2e.tw2e")).is_ok();
    outcome(
        r.delay_p99_ms < 100.0 && r.dropped == 0 && r.states == r.commands && r.poses >= 5900 && episode_ok,
        format!(
            "{} poses, {} commands, {} states, dropped {}, delay p50 {:.2} ms p99 {:.2} ms max {:.2} ms, mean r_track {:.4}",
            r.poses, r.commands, r.states, r.dropped, r.delay_p50_ms, r.delay_p99_ms, r.delay_max_ms, r.sim.mean_r_track
        ),
    )
}

fn resume_safety() -> Outcome {
    let layout = CommandLayout::from_model(&RobotModel::demo());
    let body = layout.body_range();
    let dim = layout.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut violations = 0;
    let mut checked = 0usize;
    let mut worst_slack = f64::INFINITY;
    for trial in 0..200 {
        let rate: f64 = [30.0, 50.0, 100.0][trial % 3];
        let duration = [0.5, 1.0, 2.0][(trial / 3) % 3];
        let ticks = (duration * rate).round();
        let mut s = Session::new(duration, rate);
        s.handle(CtrlEvent::Start).unwrap();
        let phase: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let live_at = |k: usize| -> Vec<f64> { phase.iter().map(|p| 0.3 * (p + 0.05 * k as f64).sin()).collect() };
        let mut out = Vec::new();
        for k in 0..20 {
            out.push(s.next(Some(&live_at(k))).unwrap());
        }
        s.handle(CtrlEvent::Pause).unwrap();
        let frozen = out.last().unwrap().clone();
        for k in 20..40 {
            out.push(s.next(Some(&live_at(k))).unwrap());
        }
        // The operator moved while paused and now holds still.
        let target: Vec<f64> = frozen.iter().map(|v| v + rng.random_range(-1.0..1.0)).collect();
        s.handle(CtrlEvent::Resume).unwrap();
        let start = out.len();
        for _ in 0..(ticks as usize + 10) {
            out.push(s.next(Some(&target)).unwrap());
        }
        for w in out[19..].windows(2) {
            for j in body.clone() {
                let bound = (target[j] - frozen[j]).abs() / ticks + 1e-9;
                let delta = (w[1][j] - w[0][j]).abs();
                worst_slack = worst_slack.min(bound - delta);
                checked += 1;
                if delta > bound {
                    violations += 1;
                }
            }
        }
        assert!(out[start..].last().unwrap() == &target);
    }
    outcome(
        violations == 0,
        format!("200 pause/resume cycles, {checked} joint steps checked, {violations} over the bound (min slack {worst_slack:.2e})"),
    )
}

fn random_episode(rng: &mut ChaCha8Rng) -> Episode {
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let layout = CommandLayout::new(
        names("b", rng.random_range(1..4)),
        names("l", rng.random_range(0..3)),
        names("r", rng.random_range(0..3)),
    );
    let dim = layout.dim();
    let joints = rng.random_range(1..4);
    let normalization = rng.random_bool(0.5).then(|| {
        NormalizationStats::new(
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..dim).map(|_| rng.random_range(0.1..2.0)).collect(),
        )
        .unwrap()
    });
    let header = EpisodeHeader {
        layout: layout.clone(),
        proprio_joints: joints,
        normalization,
        rates: Rates::default(),
        model_hash: format!("{:016x}", rng.random::<u64>()),
        created_at: rng.random_range(0..u64::MAX / 2),
    };
    let mut ep = Episode::new(header);
    let mut ts = rng.random_range(1..1_000_000_000u64);
    let mut flat: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    for _ in 0..rng.random_range(0..80) {
        ts += rng.random_range(10_000_000..200_000_000u64);
        match rng.random_range(0..3) {
            0 => flat = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            1 => flat.iter_mut().for_each(|v| *v += rng.random_range(-1e-4..1e-4)),
            _ => {}
        }
        let q = UnitQuaternion::from_euler_angles(rng.random(), rng.random(), rng.random());
        let mut state: Vec<f64> = vec![q.w, q.i, q.j, q.k];
        state.extend((0..3 + 2 * joints).map(|_| rng.random_range(-3.0..3.0)));
        let frame: Option<Vec<u8>> = rng
            .random_bool(0.3)
            .then(|| (0..rng.random_range(0..24)).map(|_| rng.random()).collect());
        ep.push(
            ts,
            CommandVector::unflatten(&layout, &flat, ts).unwrap(),
            ProprioState::unflatten(joints, &state, ts).unwrap(),
            frame.as_deref(),
        )
        .unwrap();
    }
    let kinds = [
        MarkKind::EpisodeStart,
        MarkKind::EpisodeEnd,
        MarkKind::Failure,
        MarkKind::Pause,
        MarkKind::Gap,
    ];
    for _ in 0..rng.random_range(0..8) {
        let at = rng.random_range(0..ts + 1);
        ep.add_mark(Mark::new(at, kinds[rng.random_range(0..kinds.len())]));
    }
    ep
}

fn recorder_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let (mut round_trip, mut conserved, mut idempotent) = (0, 0, 0);
    for _ in 0..400 {
        let ep = random_episode(&mut rng);
        let bytes = ep.to_bytes().unwrap();
        if Episode::from_bytes(&bytes).ok().as_ref() == Some(&ep) {
            round_trip += 1;
        }
    }
    for _ in 0..300 {
        let ep = random_episode(&mut rng);
        let (parts, report) = segment(&ep);
        let kept: usize = parts.iter().map(Episode::len).sum();
        if kept + report.dropped_records == ep.len() && report.is_consistent() && kept == report.output_records {
            conserved += 1;
        }
    }
    for _ in 0..300 {
        let ep = random_episode(&mut rng);
        let eps = rng.random_range(1e-4..1e-2);
        let min_duration = rng.random_range(0.1..2.5);
        let (once, report) = filter_idle(&ep, eps, min_duration).unwrap();
        let (twice, _) = filter_idle(&once, eps, min_duration).unwrap();
        if once == twice && report.is_consistent() {
            idempotent += 1;
        }
    }
    outcome(
        round_trip == 400 && conserved == 300 && idempotent == 300,
        format!("round-trip {round_trip}/400, segmentation conservation {conserved}/300, idle-filter idempotence {idempotent}/300"),
    )
}

fn chunk_scheduler() -> Outcome {
    let broker = Broker::start(BrokerConfig {
        addr: "127.0.0.1:0".into(),
        ..Default::default()
    })
    .unwrap();
    let addr = broker.local_addr();
    let layout = CommandLayout::from_model(&RobotModel::demo());
    let server = EchoPolicyServer::start(
        addr,
        EchoPolicyConfig {
            latency: Duration::from_millis(40),
            ..Default::default()
        },
    )
    .unwrap();
    let listener = BusClient::connect(addr, Handshake::new("acceptance", None, &[MsgType::Cmd])).unwrap();
    while broker.stats().active < 2 {
        thread::sleep(Duration::from_millis(5));
    }
    let collector = thread::spawn(move || {
        let mut stamps = Vec::new();
        while let Ok(Some(m)) = listener.recv_timeout(Duration::from_secs(2)) {
            stamps.push(m.timestamp);
        }
        stamps
    });

    let mut cfg = RunnerConfig::new(CommandVector::zeros(&layout).flatten(&layout).unwrap());
    cfg.duration = Some(Duration::from_secs(600));
    let report = run_policy(addr, &layout, cfg, Arc::new(AtomicBool::new(false)));
    let answered = server.stop();
    let stamps = collector.join().unwrap();
    broker.shutdown();
    let r = match report {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("runner error: {e}")),
    };
    let mut off: Vec<f64> = stamps
        .windows(2)
        .map(|w| ((w[1] - w[0]) as f64 / 1e6 - 1000.0 / 30.0).abs())
        .collect();
    off.sort_by(f64::total_cmp);
    let p99 = off.get(off.len() * 99 / 100).copied().unwrap_or(f64::NAN);
    let per_chunk = &r.scheduler.executed_per_chunk;
    let only_48 = per_chunk.keys().all(|k| *k == 48) && !per_chunk.is_empty();
    outcome(
        (r.rate_hz - 30.0).abs() <= 0.3 && only_48 && r.scheduler.starvation_events == 0 && r.failures == 0,
        format!(
            "{} ticks at {:.3} Hz, executed steps per chunk {:?}, starvation {}, failures {}, {} answered, interval deviation p99 {:.2} ms",
            r.ticks, r.rate_hz, per_chunk, r.scheduler.starvation_events, r.failures, answered, p99
        ),
    )
}

fn walk_tracking() -> Outcome {
    let model = RobotModel::demo();
    let motion = gen_synthetic_motion(&model, MotionKind::Walk, 60.0, 7).unwrap();
    let mut retargeter = Retargeter::new(Arc::new(model.clone()));
    let mut deriver = CommandDeriver::default();
    let mut commands = Vec::new();
    for s in motion.samples.iter().step_by(2) {
        let left = GraspCommand::new(s.grasp[0], GraspMode::Power).unwrap();
        let right = GraspCommand::new(s.grasp[1], GraspMode::Power).unwrap();
        let r = retargeter.retarget(&s.frame, &left, &right).unwrap();
        commands.push(deriver.push(PoseSample::from(&r)).unwrap());
    }
    let sim = Simulator::new(&model, &TrackerConfig::default());
    let summary = replay_tracking(&sim, &commands, 0.02, 1.0).unwrap();
    outcome(
        summary.mean > 0.95,
        format!(
            "{} commands, mean r_track {:.4}, min {:.4}",
            summary.count, summary.mean, summary.min
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("self-retargeting", self_retargeting),
    ("teleport-invariance", teleport_invariance),
    ("grid-search-oracle", grid_search_oracle),
    ("neck-round-trip", neck_round_trip),
    ("pd-tracking", pd_tracking),
    ("resume-safety", resume_safety),
    ("recorder-properties", recorder_properties),
    ("walk-tracking", walk_tracking),
    ("end-to-end-delay", end_to_end_delay),
    ("chunk-scheduler", chunk_scheduler),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{:.1} s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
