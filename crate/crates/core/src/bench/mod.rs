//! Benchmark drivers: crash campaigns, workloads and reports.

pub mod crash;
pub mod figure1;
pub mod keys;
pub mod workload;
