//! Multifidelity simulation-based inference.
//!
//! Conditional spline flows are pretrained on cheap low-fidelity simulations
//! and fine-tuned on scarce high-fidelity ones, optionally with truncated
//! sequential rounds and ensemble-variance active learning.

pub mod algorithms;
pub mod data;
pub mod flow;
pub mod metrics;
pub mod mfabc;
pub mod nn;
pub mod pool;
pub mod prior;
pub mod reference;
pub mod simulators;
pub mod tensor;
pub mod train;
