//! Adaptive-concurrency parallel downloader.
//!
//! * [`controller`] scores probing windows and proposes the next stream count.
//! * [`telemetry`] records per-stream byte deltas and aggregates throughput.
//! * [`engine`] runs a pool of ranged-request workers gated by a status array.
//! * [`resolver`] turns repository accessions into download jobs.
//! * [`simulator`] drives the same controller against a throughput model in
//!   virtual time.

pub mod controller;
pub mod telemetry;
pub mod engine;
pub mod resolver;
pub mod simulator;
