//! Simulator and hierarchical multi-agent PPO trainer for mechanically
//! reconfigurable tiled mmWave reflectors steered by focal points.

pub mod channel;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod marl;
pub mod nn;

pub use error::{Error, Result};
