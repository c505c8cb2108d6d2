//! Tracker simulator attached to the bus.
//!
//! Steps once per received CMD, using the spacing of command timestamps as
//! the time step, and publishes the resulting STATE tagged with the command's
//! timestamp. Each command is scored against the state it arrived at.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use log::warn;
use tw2_bus::wire::{self, Handshake, MsgType};
use tw2_bus::BusClient;
use tw2_core::tracker::{SimState, Simulator, TrackerConfig};
use tw2_core::{CommandLayout, CommandVector, RobotModel};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimReport {
    pub commands: u64,
    pub rejected: u64,
    pub mean_r_track: f64,
    pub min_r_track: f64,
}

pub struct SimNode {
    sim: Simulator,
    layout: CommandLayout,
    alpha: f64,
    default_dt: f64,
    state: Option<SimState>,
    last_ts: u64,
    sum: f64,
    report: SimReport,
}

impl SimNode {
    pub fn new(model: &RobotModel, tracker: &TrackerConfig, alpha: f64, cmd_hz: f64) -> Self {
        Self {
            sim: Simulator::new(model, tracker),
            layout: CommandLayout::from_model(model),
            alpha,
            default_dt: 1.0 / cmd_hz,
            state: None,
            last_ts: 0,
            sum: 0.0,
            report: SimReport {
                min_r_track: 1.0,
                ..Default::default()
            },
        }
    }

    pub fn layout(&self) -> &CommandLayout {
        &self.layout
    }

    /// Applies one flattened command and returns the proprioceptive state.
    pub fn apply(&mut self, flat: &[f64], cmd_ts: u64) -> Result<Vec<f64>, CliError> {
        let cmd = CommandVector::unflatten(&self.layout, flat, cmd_ts)?;
        let next = match &self.state {
            None => self.sim.state_at(&cmd)?,
            Some(state) => {
                let m = self.sim.track(state, &cmd, self.alpha)?;
                self.sum += m.r_track;
                self.report.min_r_track = self.report.min_r_track.min(m.r_track);
                let mut dt = cmd_ts.saturating_sub(self.last_ts) as f64 * 1e-9;
                if !(dt > 0.0 && dt <= 0.1) {
                    dt = self.default_dt;
                }
                self.sim.step(state, &cmd, dt)?
            }
        };
        self.report.commands += 1;
        self.last_ts = cmd_ts;
        let flat = self.sim.proprio(&next).flatten();
        self.state = Some(next);
        Ok(flat)
    }

    pub fn report(&self) -> SimReport {
        let scored = self.report.commands.saturating_sub(1);
        SimReport {
            mean_r_track: if scored == 0 { 1.0 } else { self.sum / scored as f64 },
            ..self.report
        }
    }
}

/// Serves the simulator on the bus until `stop` is set or the bus closes.
pub fn run_sim(
    addr: SocketAddr,
    model: &RobotModel,
    tracker: &TrackerConfig,
    alpha: f64,
    cmd_hz: f64,
    stop: &AtomicBool,
) -> Result<SimReport, CliError> {
    let mut node = SimNode::new(model, tracker, alpha, cmd_hz);
    let client = BusClient::connect(addr, Handshake::new("sim", Some(node.layout().clone()), &[MsgType::Cmd]))?;
    while !stop.load(Ordering::Relaxed) {
        let Some(msg) = client.recv_timeout(Duration::from_millis(20))? else { continue };
        if msg.kind != MsgType::Cmd {
            continue;
        }
        let flat = match wire::parse_cmd(&msg.payload, node.layout()) {
            Ok(f) => f,
            Err(e) => {
                warn!("sim: ignoring command: {e}");
                node.report.rejected += 1;
                continue;
            }
        };
        let proprio = node.apply(&flat, msg.timestamp)?;
        client.publish(MsgType::State, wire::state_payload(msg.timestamp, &proprio))?;
    }
    Ok(node.report())
}
