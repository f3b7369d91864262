//! Independent oracles and fixtures for testing the measure-steer solvers:
//! closed-form flows, brute-force transport distances, a reference
//! integrator, and synthetic raster data. Nothing here depends on the
//! crates under test, so agreement between a solver and an oracle is
//! evidence, not circularity.

pub mod csvish;
pub mod example1;
pub mod idx;
pub mod ode;
pub mod w1;
