//! Single-operator session state machine.
//!
//! The session sits between the live command stream and the bus. It decides
//! what is emitted each command tick: nothing while idle, the live command
//! while active, a frozen pose while paused, a linear blend back to the live
//! command after resuming, and one final hold command when stopped.

use serde::{Deserialize, Serialize};

use crate::error::TransitionError;
use crate::wire::{CtrlAck, CtrlEvent};

/// Root velocity entries of a flattened command (vx, vy, yaw_rate).
const VELOCITY_INDICES: [usize; 3] = [0, 1, 5];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Mode {
    Idle = 0,
    Active = 1,
    Paused = 2,
    Interpolating = 3,
    Stopped = 4,
}

impl Mode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Idle,
            1 => Self::Active,
            2 => Self::Paused,
            3 => Self::Interpolating,
            4 => Self::Stopped,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Idle => "idle",
            Self::Active => "active",
            Self::Paused => "paused",
            Self::Interpolating => "interpolating",
            Self::Stopped => "stopped",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Interp {
    from: Vec<f64>,
    tick: usize,
    ticks: usize,
}

#[derive(Debug, Clone)]
pub struct Session {
    mode: Mode,
    resume_duration: f64,
    rate_hz: f64,
    last: Option<Vec<f64>>,
    live: Option<Vec<f64>>,
    frozen: Option<Vec<f64>>,
    interp: Option<Interp>,
    final_hold: Option<Vec<f64>>,
}

pub fn holding(cmd: &[f64]) -> Vec<f64> {
    let mut out = cmd.to_vec();
    for i in VELOCITY_INDICES {
        if let Some(v) = out.get_mut(i) {
            *v = 0.0;
        }
    }
    out
}

impl Session {
    pub const DEFAULT_RESUME_SECONDS: f64 = 1.0;

    /// `rate_hz` is the command emission rate the interpolation is counted in.
    pub fn new(resume_duration: f64, rate_hz: f64) -> Self {
        assert!(resume_duration >= 0.0 && rate_hz > 0.0);
        Self {
            mode: Mode::Idle,
            resume_duration,
            rate_hz,
            last: None,
            live: None,
            frozen: None,
            interp: None,
            final_hold: None,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn last_emitted(&self) -> Option<&[f64]> {
        self.last.as_deref()
    }

    /// Fraction of the resume window completed, while interpolating.
    pub fn interpolation_progress(&self) -> Option<f64> {
        self.interp.as_ref().map(|i| i.tick as f64 / i.ticks as f64)
    }

    fn interp_ticks(&self) -> usize {
        ((self.resume_duration * self.rate_hz).round() as usize).max(1)
    }

    /// Applies `event`. Illegal transitions leave the session unchanged.
    /// Mark events are accepted in every mode and do not change it.
    pub fn handle(&mut self, event: CtrlEvent) -> Result<Mode, TransitionError> {
        let illegal = Err(TransitionError { from: self.mode, event });
        match (event, self.mode) {
            (e, _) if e.is_mark() => {}
            (CtrlEvent::Start, Mode::Idle) => self.mode = Mode::Active,
            (CtrlEvent::Pause, Mode::Active | Mode::Interpolating) => {
                self.frozen = self.last.as_deref().map(holding);
                self.interp = None;
                self.mode = Mode::Paused;
            }
            (CtrlEvent::Resume, Mode::Paused) => match self.frozen.take() {
                Some(from) => {
                    self.interp = Some(Interp {
                        from,
                        tick: 0,
                        ticks: self.interp_ticks(),
                    });
                    self.mode = Mode::Interpolating;
                }
                None => self.mode = Mode::Active,
            },
            (CtrlEvent::Stop, m) if m != Mode::Stopped => self.stop(),
            (CtrlEvent::Estop, _) => self.stop(),
            _ => return illegal,
        }
        Ok(self.mode)
    }

    /// Applies `event` and builds the CTRL acknowledgement for it.
    pub fn apply(&mut self, event: CtrlEvent) -> CtrlAck {
        let accepted = self.handle(event).is_ok();
        CtrlAck {
            event,
            mode: self.mode as u8,
            accepted,
        }
    }

    fn stop(&mut self) {
        self.final_hold = self.last.as_deref().map(holding);
        self.interp = None;
        self.frozen = None;
        self.mode = Mode::Stopped;
    }

    /// Records the latest live command without emitting anything.
    pub fn set_live(&mut self, live: &[f64]) {
        self.live = Some(live.to_vec());
    }

    /// The command to emit this tick, given the newest live command.
    pub fn next(&mut self, live: Option<&[f64]>) -> Option<Vec<f64>> {
        if let Some(l) = live {
            self.set_live(l);
        }
        let out = match self.mode {
            Mode::Idle => None,
            Mode::Active => live.map(<[f64]>::to_vec),
            Mode::Paused => self.frozen.clone(),
            Mode::Interpolating => {
                let interp = self.interp.as_mut().expect("interpolating without state");
                let target = self.live.as_ref().unwrap_or(&interp.from);
                interp.tick += 1;
                let a = interp.tick as f64 / interp.ticks as f64;
                let out: Vec<f64> = interp
                    .from
                    .iter()
                    .zip(target)
                    .map(|(f, t)| if a >= 1.0 { *t } else { f + (t - f) * a })
                    .collect();
                if interp.tick >= interp.ticks {
                    self.interp = None;
                    self.mode = Mode::Active;
                }
                Some(out)
            }
            Mode::Stopped => return self.final_hold.take(),
        };
        if let Some(o) = &out {
            self.last = Some(o.clone());
        }
        out
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new(Self::DEFAULT_RESUME_SECONDS, 50.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cmd(q: f64) -> Vec<f64> {
        vec![0.3, 0.1, 0.75, 0.0, 0.0, 0.2, q, -q]
    }

    #[test]
    fn legal_and_illegal_transitions() {
        let mut s = Session::default();
        assert!(s.handle(CtrlEvent::Resume).is_err());
        assert_eq!(s.mode(), Mode::Idle);
        assert_eq!(s.handle(CtrlEvent::Start), Ok(Mode::Active));
        let err = s.handle(CtrlEvent::Start).unwrap_err();
        assert_eq!(err.from, Mode::Active);
        assert_eq!(s.mode(), Mode::Active);
        assert_eq!(s.handle(CtrlEvent::MarkFailure), Ok(Mode::Active));
        assert_eq!(s.handle(CtrlEvent::Pause), Ok(Mode::Paused));
        assert!(s.handle(CtrlEvent::Pause).is_err());
        assert_eq!(s.handle(CtrlEvent::Stop), Ok(Mode::Stopped));
        assert!(s.handle(CtrlEvent::Stop).is_err());
        assert!(s.handle(CtrlEvent::Start).is_err());
    }

    #[test]
    fn estop_from_every_mode() {
        let setups: [&[CtrlEvent]; 5] = [
            &[],
            &[CtrlEvent::Start],
            &[CtrlEvent::Start, CtrlEvent::Pause],
            &[CtrlEvent::Start, CtrlEvent::Pause, CtrlEvent::Resume],
            &[CtrlEvent::Start, CtrlEvent::Stop],
        ];
        for events in setups {
            let mut s = Session::default();
            for e in events {
                s.handle(*e).unwrap();
                s.next(Some(&cmd(0.1)));
            }
            assert_eq!(s.handle(CtrlEvent::Estop), Ok(Mode::Stopped));
        }
    }

    #[test]
    fn pause_freezes_with_zero_velocity() {
        let mut s = Session::default();
        s.handle(CtrlEvent::Start).unwrap();
        s.next(Some(&cmd(0.1)));
        s.handle(CtrlEvent::Pause).unwrap();
        let frozen = s.next(Some(&cmd(0.4))).unwrap();
        assert_eq!(frozen, vec![0.0, 0.0, 0.75, 0.0, 0.0, 0.0, 0.1, -0.1]);
        for k in 0..20 {
            let out = s.next(Some(&cmd(0.1 * k as f64))).unwrap();
            assert_eq!(
                out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                frozen.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn resume_blends_over_fifty_ticks() {
        let mut s = Session::new(1.0, 50.0);
        s.handle(CtrlEvent::Start).unwrap();
        s.next(Some(&cmd(0.0)));
        s.handle(CtrlEvent::Pause).unwrap();
        let mut prev = s.next(None).unwrap();
        s.handle(CtrlEvent::Resume).unwrap();
        let target = cmd(0.5);
        let mut blended = 0;
        while s.mode() == Mode::Interpolating {
            let out = s.next(Some(&target)).unwrap();
            let step = (out[6] - prev[6]).abs();
            assert!(step <= 0.5 / 50.0 + 1e-9, "{step}");
            prev = out;
            blended += 1;
        }
        assert_eq!(blended, 50);
        assert_eq!(prev, target);
        assert_eq!(s.next(Some(&target)), Some(target));
    }

    #[test]
    fn estop_emits_single_hold() {
        let mut s = Session::default();
        s.handle(CtrlEvent::Start).unwrap();
        s.next(Some(&cmd(0.3)));
        s.handle(CtrlEvent::Estop).unwrap();
        let hold = s.next(Some(&cmd(0.9))).unwrap();
        assert_eq!(hold, holding(&cmd(0.3)));
        assert_eq!(s.next(Some(&cmd(0.9))), None);
    }

    #[test]
    fn idle_emits_nothing() {
        let mut s = Session::default();
        assert_eq!(s.next(Some(&cmd(0.3))), None);
    }
}
