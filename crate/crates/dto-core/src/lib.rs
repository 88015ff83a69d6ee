//! Distributed continuous-time optimization of time-varying costs under
//! time-varying inequality constraints and bounded disturbances.
//!
//! Each agent runs first-order dynamics `xdot = u + d` and cooperates over an
//! undirected communication graph to track the minimizer trajectory of the
//! summed cost. The pieces, one module each:
//!
//! * [`graph`] — topologies, Laplacian/incidence matrices, connectivity.
//! * [`problem`] — time-varying cost/constraint functions, per-agent problem
//!   data, the built-in four-agent scenarios, and finite-difference oracles.
//! * [`penalty`] — the log-barrier penalized objective with exponential
//!   barrier/slack schedules and its analytic derivatives.
//! * [`controller`] — the two-part control law: sign-based consensus plus a
//!   Newton tracking flow, and a fixed-time integral sliding-mode term.
//! * [`sim`] — fixed-step closed-loop integration, trajectory recording,
//!   convergence metrics, and independent centralized optimum solvers.
//!
//! The crate is `no_std` (with `alloc`); all floating-point transcendentals
//! route through `libm` so results are identical under std and no-std builds.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod controller;
pub mod graph;
mod linalg;
mod math;
pub mod penalty;
pub mod problem;
mod rng;
pub mod sim;

pub use nalgebra;
pub use nalgebra::{DMatrix, DVector};
