//! Real-time near-time-optimal quadrotor navigation inside time-varying
//! corridors.
//!
//! The crate reformulates the quadrotor rigid-body dynamics in path
//! coordinates (progress along a reference spline plus two transverse
//! offsets), models the free space around the path as a polyhedral tunnel
//! with progress-dependent faces, and drives the vehicle with a
//! progress-maximizing nonlinear MPC solved by Gauss-Newton SQP over a
//! Riccati-based interior-point QP. A closed-loop simulator and CLI run
//! single scenarios or randomized difficulty suites.

pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod config;
pub mod sim;
pub mod solver;
pub mod spatial;
pub mod ocp;
pub mod tunnel;

pub use error::{Error, Result};
