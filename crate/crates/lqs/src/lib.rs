//! Stochastic optimal control toolkit for shared human/automation reaching.
//!
//! The crate models a one-dimensional reaching movement as a linear plant
//! under quadratic cost with signal-dependent sensorimotor noise, solves the
//! coupled controller/estimator fixed point for the human policy, simulates
//! trial ensembles, fits cost and noise parameters to recorded trajectories,
//! and synthesizes assistive automation gains whose closed-loop position
//! variability matches or deliberately reduces the human baseline.

pub mod error;
pub mod hvroc;
pub mod ident;
pub mod io;
pub mod model;
pub mod moments;
pub mod optim;
pub mod sim;
pub mod solver;

pub use error::{Error, Result};
