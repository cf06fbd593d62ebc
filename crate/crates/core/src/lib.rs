//! Cascade feature aggregation for single-person pose estimation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod cascade;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod graph;
pub mod heatmap;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod params;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{CfaError, Result};
