//! Message bus, teleoperation session control, recording and the policy runner.

pub mod broker;
pub mod bridge;
pub mod client;
pub mod error;
pub mod inference;
pub mod latency;
pub mod recorder;
pub mod runner;
pub mod session;
pub mod wire;

pub use broker::{Broker, BrokerConfig, BrokerHandle};
pub use client::BusClient;
pub use error::{BusError, ProtocolError, TransitionError};
pub use session::{Mode, Session};
pub use wire::{CtrlEvent, Handshake, Message, MsgType};

pub const DEFAULT_PORT: u16 = 7447;
pub const DEFAULT_BRIDGE_PORT: u16 = 7448;
