//! Five-link planar biped laboratory: constrained dynamics, virtual
//! constraints, input-output linearizing control with a learned additive
//! correction, hybrid simulation, DDPG training and Poincare analysis.

pub mod analysis;
pub mod control;
pub mod error;
pub mod gait;
pub mod learn;
pub mod model;
pub mod optim;
pub mod sim;

pub use error::{Error, Result};
pub use model::{RobotParams, RobotState};
