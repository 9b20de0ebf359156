//! Socially-aware lane-change toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`svo`]: Social Value Orientation angles from displacement utilities.
//! - [`intent_bn`]: class-conditional Gaussians, percent-point discretization
//!   and the yield/pass posterior.
//! - [`traffic`]: IDM car-following and MOBIL lane-change acceptance.
//! - [`env`]: the three-lane highway MDP with AV, target and forward vehicle.
//! - [`dqn`]: a small feedforward Q-network trained with replay and a target copy.
//! - [`ngsim`]: NGSIM-format trajectory ingestion, event detection and labeling.
//! - [`synth`]: scripted episodes that produce labeled samples without external data.

pub mod dqn;
pub mod env;
pub mod error;
pub mod intent_bn;
pub mod ngsim;
pub mod normal;
pub mod rng;
pub mod svo;
pub mod synth;
pub mod traffic;

pub use error::{Error, Result};
