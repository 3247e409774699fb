//! Sampling-based stochastic NMPC with PAC performance bounds and a learned,
//! lidar-conditioned terminal value function.

pub mod bench;
pub mod config;
pub mod dynamics;
pub mod mpc;
pub mod nn;
pub mod pac;
pub mod td3;
pub mod terminal;
pub mod world;
