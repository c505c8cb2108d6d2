pub mod config;
pub mod error;
pub mod sim_node;
pub mod teleop;

pub use config::PipelineConfig;
pub use error::CliError;
