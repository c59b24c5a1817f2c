//! Consistency, diversity and realism evaluation of conditional image
//! generators, with Pareto-front extraction over model-knob sweeps.

pub mod cli;
pub mod conditional;
pub mod kernel;
pub mod knob;
pub mod marginal;
pub mod model;
pub mod pareto;
pub mod report;
pub mod sim;
pub mod store;
