//! Dynamics, differential flatness and CLF-based tracking control for aerial
//! manipulators: a multirotor base carrying a serial revolute arm.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x < y)` also rejects NaN.

pub mod controller;
pub mod error;
pub mod flatness;
pub mod mechanism;
pub mod oracle;
pub mod reduced;
pub mod sim;
pub mod spatial;
pub mod verify;

pub use error::{Error, Result};
pub use mechanism::AMParams;
pub use reduced::{ControlInput, ExtendedInput, ExtendedState, ReducedState};
pub use spatial::EulerAngles;
