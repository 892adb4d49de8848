//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`graph::Graph`] is a flat tape: every operation appends a node holding
//! its output value and enough bookkeeping to run the chain rule backwards.
//! Nothing is retained across steps; training builds a fresh graph per batch.
//!
//! Determinism contract: given the same inputs and seeds, every op produces
//! bit-identical results regardless of how many worker threads are available.
//! Parallel kernels only ever split work across disjoint output regions and
//! keep the per-element accumulation order fixed.

pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tensor;
