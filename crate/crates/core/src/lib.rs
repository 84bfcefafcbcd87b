//! Shared-trunk multi-task soft actor-critic with a weight-predicting adapter.
//!
//! The policy is a shared feature trunk followed by one linear output layer
//! per training task. An adapter network is trained alongside it to regress
//! a task's output-layer weights from single transitions, so a new task is
//! handled by a short feedback loop of predictions instead of gradient steps.
//!
//! The crate is `no_std` and needs only `alloc`. File formats, timing and the
//! command line live in the `flap` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adapter;
pub mod env;
pub mod eval;
pub mod math;
pub mod meta;
pub mod nn;
pub mod replay;
pub mod sac;
