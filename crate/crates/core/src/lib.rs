//! Building blocks for running HPC workloads in containers: environment
//! definitions, explicit engine plans, a flattened shared image store, the
//! runtime hook pipeline, and a deterministic job-step launch simulator.

pub mod digest;
pub mod edf;
pub mod hooks;
pub mod imagestore;
pub mod launchsim;
pub mod plan;
