//! Scenario-driven command line for steering measure-valued ensembles:
//! parse a scenario file (or one of the built-ins), build the declared
//! grid or particle problem, and run the feedback improvement loop, a
//! plain transport pass, an extremality check, or image ingestion.  Every
//! run writes CSV artifacts plus a manifest with content hashes, and is
//! byte-for-byte reproducible from the scenario text and seed.

pub mod artifacts;
pub mod runner;
pub mod scenario;
pub mod sources;

pub use runner::{run, CommandKind, RunConfig, RunError, RunOutcome};
pub use scenario::{Backend, Scenario, ScenarioError};
