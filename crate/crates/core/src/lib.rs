//! Robust trajectory optimization for nonlinear discrete-time systems under
//! ellipsoidal disturbance sets, with affine disturbance-feedback policies.
//!
//! The pipeline: [`models`] supply dynamics and Jacobians, [`lintraj`] stacks
//! them along a nominal trajectory, [`constraints`] linearizes the state
//! constraints and forms their robust margins, [`inner_admm`] and [`sco`]
//! solve the resulting sequence of conic programs (through [`conic`]), and
//! [`monte`] validates a policy by closed-loop simulation.

pub mod cli;
pub mod conic;
pub mod constraints;
pub mod error;
pub mod inner_admm;
pub mod lintraj;
pub mod models;
pub mod monte;
pub mod run;
pub mod scenario;
pub mod sco;
pub mod uncertainty;

pub use error::{Error, Result};
