//! MEG wavelet cross-correlation workloads and an economy-driven grid
//! broker that schedules them under deadline and budget constraints.
//!
//! - [`recording`]: raw multi-sensor recordings, synthesis, windowing.
//! - [`wavelet`]: Morlet CWT, wavelet cross-correlation, ASC/PPM output.
//! - [`plan`]: the parameter-sweep plan language and its expansion.
//! - [`workload`]: meta-job partitioning, sizing, and local execution.
//! - [`market`]: the priced service directory.
//! - [`scheduler`]: forecasting and the three allocation strategies.
//! - [`sim`]: the discrete-event testbed that drives the broker.

pub mod market;
pub mod plan;
pub mod recording;
pub mod scheduler;
pub mod sim;
pub mod wavelet;
pub mod workload;
