//! Steering ensembles of ordinary dynamics by a single open-loop control.
//!
//! The state of each population is a nonnegative measure `μ_t` on `R^n`
//! transported by a controlled velocity field,
//!
//! ```text
//! ∂_t μ + ∇·((f + Σ_k u^k f^k) μ) = 0,        μ_0 = ϑ,
//! ```
//!
//! where the control `u(t)` takes values in a box `U` and is shared by every
//! agent (and every population) at once.  The objective is a terminal cost
//! `Σ_pop ∫ ℓ dμ_T` to be minimized over open-loop controls.
//!
//! The crate provides:
//!
//! * [`measures`] for grid densities, weighted particle ensembles, first
//!   moments, Kantorovich (W1) distance, raster ingestion;
//! * [`fields`] for vector fields, a small expression language for defining
//!   them, control families `f + Σ u^k f^k` and box control sets;
//! * [`transport`] for donor-cell finite-volume transport of densities and an
//!   upwind backward solver for the dual (costate) equation;
//! * [`particles`] for characteristic flows, push-forwards and the dual along
//!   characteristics for the particle backend;
//! * [`pmp`] for switching vectors, extremal (bang-bang) controls, the exact
//!   cost-increment formula and maximum-principle residuals;
//! * [`fmp`] for feedback sampling (Krasovskii–Subbotin polygons), the
//!   iterative descent built on it, and the terminal qualification check.

pub mod fields;
pub mod fmp;
pub mod measures;
pub mod particles;
pub mod pmp;
pub mod time;
pub mod transport;

pub use fields::{ControlFamily, ControlSet, ScalarField, VectorField};
pub use fmp::{
    fmp_iterate_grid, fmp_iterate_particles, FmpParams, FmpReport, GridProblem, ParticleProblem,
    SamplingScheme,
};
pub use measures::{EmpiricalMeasure, GridMeasure, GridSpec};
pub use particles::{EmpiricalTrajectory, EnsembleState, FlowMap, IntegratorScheme, IntegratorSpec};
pub use pmp::{extremal_control, FeedbackLaw, PmpResidual, SwitchingVector};
pub use time::{ControlSignal, Partition, TimeGrid};
pub use transport::{DensityTrajectory, DualState, FaceField, GridField, GridSampledFamily};
