//! Method-level computation offloading.
//!
//! A client registers [`task::TaskBundle`]s with a [`controller::Runtime`]
//! and runs them through an [`controller::ExecutionController`], which picks
//! local or remote execution from profiled history. The server side is an
//! [`appserver::AppServer`] backed by a simulated [`vmpool::VmPool`].

pub mod appserver;
pub mod client;
pub mod clock;
pub mod controller;
pub mod energy;
pub mod netem;
pub mod profiling;
pub mod protocol;
pub mod task;
pub mod transport;
pub mod vmpool;
