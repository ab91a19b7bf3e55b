//! Harness behind the `epsim` binary: workloads, oracle verification,
//! footprint reporting and stats CSV output.

pub mod footprint;
pub mod harness;
pub mod props;
pub mod report;
pub mod run;
