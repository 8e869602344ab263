//! Simulation of attention-guided, bandwidth-adaptive gradient synchronization
//! between edge devices and a cloud aggregator, plus the reference baselines
//! it is measured against.
//!
//! The crate is organised bottom-up: [`tensor`] holds the model and its block
//! partition, [`importance`], [`compression`] and [`budget`] decide what a
//! device sends, [`coordinator`] turns uploads into a global step, [`netsim`]
//! prices every message in simulated time, and [`harness`] drives whole runs.

pub mod budget;
pub mod compression;
pub mod coordinator;
pub mod error;
pub mod harness;
pub mod importance;
pub mod netsim;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
