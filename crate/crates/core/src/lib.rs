//! Joint pruning-and-quantization search for trained networks.
//!
//! Pruning a channel is treated as quantizing it to 0 bits, so a single
//! mixed-precision search assigns every output channel of every layer an
//! integer bitwidth in `[0, bit_max]` under a hard model-size budget. A DDPG
//! layer controller predicts per-layer sparsity in continuous space; a greedy
//! channel controller ranks channels by L1-norm importance, derives
//! importance-proportional bitwidth floors, and decrements bits until the
//! budget holds. The plan with the highest reward across search episodes wins.
//!
//! Crate layout mirrors the pipeline:
//!
//! - [`ir`]: network description, weights, size/FLOPs accounting, model files
//! - [`importance`]: per-channel L1 scores and rankings
//! - [`quant`]: bitwidth plans, fake quantization, plan files
//! - [`agent`]: the DDPG layer controller
//! - [`controller`]: state featurization and the greedy channel controller
//! - [`eval`]: forward inference, accuracy probes, dataset files
//! - [`search`]: the episode loop, rewards, traces
//! - [`report`]: trace-to-plot-data conversion
//! - [`fixtures`]: deterministic desk-scale models and datasets
//!
//! The `parallel` feature (on by default) runs batch evaluation on a rayon
//! pool; disabling it falls back to an identical sequential path.

pub mod agent;
pub mod controller;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod importance;
pub mod ir;
pub mod quant;
pub mod report;
pub mod search;

pub use error::{Error, Result};
