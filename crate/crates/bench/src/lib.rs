//! Benchmark workloads and the evaluation harness for the offloading
//! runtime: correctness oracles, boundary-input search and a scenario
//! matrix that emits CSV, JSON lines and gnuplot data.

pub mod fixtures;
pub mod harness;
pub mod oracles;
pub mod workloads;
