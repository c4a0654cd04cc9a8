//! Experiment drivers built on the `alfg` solver: constrained SE(2) pose
//! estimation, rotation synchronisation over unconstrained 3×3 matrices, and
//! receding-horizon control of a pseudo-omnidirectional platform.

mod error;
pub mod mpc;
pub mod pose;
pub mod rotsync;
pub mod selftest;

pub use error::{AppError, AppResult};
