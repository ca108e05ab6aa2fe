//! Planning core for memory-aware fine-grained MoE training.
//!
//! - [`config`]: scenario schema and validation
//! - [`memory_model`]: static and activation memory of one GPU, feasibility
//! - [`routing_sim`]: synthetic imbalanced routing traces
//! - [`moe_kernel`]: a numerically exact MoE layer with chunked dispatch/compute/combine
//! - [`mact`]: per-stage chunk-count tuning from the memory model
//! - [`throughput`]: iteration-time model and tokens/GPU/s
//!
//! The crate is `no_std` and needs only `alloc`.
#![no_std]

extern crate alloc;

pub mod config;
pub mod error;
pub mod mact;
pub mod memory_model;
pub mod moe_kernel;
pub mod routing_sim;
pub mod throughput;

pub use config::{validate, ModelConfig, ParallelEnv, PrecisionAndHardware, RecomputeMode, Scenario, ValidatedScenario};
pub use error::{Error, Result};
