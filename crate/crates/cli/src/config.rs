//! Pipeline configuration, loaded from TOML with command-line overrides.
//!
//! ```toml
//! model = "crates/core/assets/demo_humanoid.toml"   # omit for the built-in model
//! duration_s = 60.0
//! record = "session.tw2e"
//!
//! [source]
//! kind = "synthetic"          # synthetic | pose-file | bus-topic
//! motion = "walk"
//! seed = 7
//!
//! [rates]
//! pose_hz = 100.0
//! cmd_hz = 50.0
//! record_hz = 30.0
//!
//! [ports]
//! host = "127.0.0.1"
//! bus = 7447
//! bridge = 7448
//!
//! [solver]
//! max_iterations = 30
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tw2_core::motion::MotionKind;
use tw2_core::RobotModel;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    Synthetic {
        #[serde(default = "default_motion")]
        motion: MotionKind,
        #[serde(default = "default_seed")]
        seed: u64,
    },
    PoseFile {
        path: PathBuf,
    },
    /// Human frames published on the bus POSE topic by another process.
    BusTopic,
}

fn default_motion() -> MotionKind {
    MotionKind::Walk
}

fn default_seed() -> u64 {
    7
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Synthetic {
            motion: default_motion(),
            seed: default_seed(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub pose_hz: f64,
    pub cmd_hz: f64,
    pub record_hz: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self {
            pose_hz: 100.0,
            cmd_hz: 50.0,
            record_hz: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortConfig {
    pub host: String,
    pub bus: u16,
    pub bridge: u16,
}

impl Default for PortConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            bus: tw2_bus::DEFAULT_PORT,
            bridge: tw2_bus::DEFAULT_BRIDGE_PORT,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOverrides {
    pub max_iterations: Option<usize>,
    pub lambda_pos: Option<f64>,
    pub step_tolerance: Option<f64>,
    pub initial_damping: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: Option<PathBuf>,
    pub source: SourceConfig,
    pub rates: RateConfig,
    pub ports: PortConfig,
    pub solver: SolverOverrides,
    /// Run length for synthetic sources; pose files play to the end.
    pub duration_s: f64,
    pub record: Option<PathBuf>,
    pub resume_s: f64,
    /// Serve the websocket bridge.
    pub bridge: bool,
    /// Use a broker already listening on `ports.bus` instead of starting one.
    pub external_broker: bool,
    /// Tracking reward sharpness.
    pub alpha: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            model: None,
            source: SourceConfig::default(),
            rates: RateConfig::default(),
            ports: PortConfig::default(),
            solver: SolverOverrides::default(),
            duration_s: 60.0,
            record: None,
            resume_s: 1.0,
            bridge: false,
            external_broker: false,
            alpha: 1.0,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let r = &self.rates;
        for (name, v) in [("pose_hz", r.pose_hz), ("cmd_hz", r.cmd_hz), ("record_hz", r.record_hz)] {
            if !(v >= 1.0) || !v.is_finite() {
                return Err(CliError::Config(format!("rates.{name} must be >= 1, got {v}")));
            }
        }
        if r.cmd_hz > r.pose_hz {
            return Err(CliError::Config("rates.cmd_hz cannot exceed rates.pose_hz".into()));
        }
        if !(self.duration_s > 0.0) {
            return Err(CliError::Config(format!("duration_s must be positive, got {}", self.duration_s)));
        }
        if !(self.resume_s >= 0.0) {
            return Err(CliError::Config(format!("resume_s must be >= 0, got {}", self.resume_s)));
        }
        if !(self.alpha > 0.0) {
            return Err(CliError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if let Some(m) = &self.model {
            if !m.exists() {
                return Err(CliError::Config(format!("model file {} does not exist", m.display())));
            }
        }
        if let SourceConfig::PoseFile { path } = &self.source {
            if !path.exists() {
                return Err(CliError::Config(format!("pose file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    /// Loads the model and applies solver overrides.
    pub fn load_model(&self) -> Result<RobotModel, CliError> {
        let mut model = match &self.model {
            Some(p) => RobotModel::load(p)?,
            None => RobotModel::demo(),
        };
        let s = model.solver_config_mut();
        let o = &self.solver;
        if let Some(v) = o.max_iterations {
            s.max_iterations = v;
        }
        if let Some(v) = o.lambda_pos {
            s.lambda_pos = v;
        }
        if let Some(v) = o.step_tolerance {
            s.step_tolerance = v;
        }
        if let Some(v) = o.initial_damping {
            s.initial_damping = v;
        }
        Ok(model)
    }

    pub fn bus_addr(&self) -> String {
        format!("{}:{}", self.ports.host, self.ports.bus)
    }

    pub fn bridge_addr(&self) -> String {
        format!("{}:{}", self.ports.host, self.ports.bridge)
    }
}
