//! Time-minimized joint-space trajectory planning for serial arms carrying
//! open-top or fragile payloads.

pub mod constraints;
pub mod error;
pub mod kinematics;
pub mod par;
pub mod planner;
pub mod qp;
pub mod sqp;
pub mod trajectory;
pub mod verify;

pub use error::{Error, Result};
pub use kinematics::{KinState, RobotModel};
pub use trajectory::Trajectory;
