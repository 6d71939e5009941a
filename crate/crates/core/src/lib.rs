//! Simulator and library for auditing vertical federated learning inference.
//!
//! A data party serves fast, untrusted inference; a simulated enclave plus a
//! coordinator recompute a secret random sample of the same inferences on a
//! trusted path, and the task party compares the two. The crate covers the
//! numerical engine, the party protocol, privacy-aware training, the enclave
//! boundary, the sampling audit, pipeline scheduling, fault injection and the
//! experiment harness.

pub mod nn;
pub mod rng;
pub mod audit;
pub mod pipeline;
pub mod privacy;
pub mod protocol;
pub mod enclave;
pub mod harness;
pub mod faults;
