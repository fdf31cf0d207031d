//! Communication-scale-minimized sharded data parallelism.
//!
//! The crate is organised bottom-up:
//!
//! * [`topology`]: cluster shapes, partition/replication groups and memory feasibility.
//! * [`collectives`]: virtual-rank collectives over byte buffers, including the
//!   three-stage hierarchical all-gather and batched (coalesced) variants.
//! * [`sync_schedule`]: 2-hop gradient synchronization and the global all-reduce
//!   alternative, with a brute-force oracle.
//! * [`cost_model`]: closed-form collective cost, traffic, latency and FLOP models.
//! * [`simulator`]: a discrete-event model of one training iteration.
//!
//! Numeric code is generic over the scalar type (see [`scalar`]); the aliases
//! below fix the common `f64` instantiation.

pub mod collectives;
pub mod cost_model;
pub mod error;
pub mod scalar;
pub mod simulator;
pub mod sync_schedule;
pub mod topology;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};

/// Cluster description with `f64` bandwidths and latencies.
pub type Cluster = topology::ClusterSpec<f64>;
/// Bandwidth profile with `f64` entries.
pub type Profile = cost_model::BandwidthProfile<f64>;
/// Layer description with `f64` FLOP counts.
pub type Layer = simulator::LayerSpec<f64>;
/// Simulated iteration with `f64` timings.
pub type Trace = simulator::IterationTrace<f64>;
/// Simulator knobs with `f64` factors.
pub type SimOptions = simulator::SimOptions<f64>;
/// Exact rational used for byte-volume identities.
pub type Exact = num_rational::Ratio<i128>;
