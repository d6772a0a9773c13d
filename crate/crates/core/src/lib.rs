//! Elastic GQA transformer super-networks: importance sorting, calibrated
//! sub-network grids, sandwich-rule training with in-place distillation,
//! and Pareto-front evaluation.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod grid;
pub mod importance;
pub mod kd;
pub mod model;
pub mod numerics;
pub mod registry;
pub mod search;
pub mod train;

pub use error::{Error, Result};
