//! Joint radio/compute allocation and slice selection for COIN+MEC edge systems.

pub mod config;
pub mod model;
pub mod solver;
pub mod dataset;
pub mod neuralset;
pub mod evaluation;
