//! Command-line driver: simulation, training, evaluation, gradient checks,
//! the ablation matrix and benchmark presets.

pub mod ablation;
pub mod args;
pub mod bench;
pub mod commands;
pub mod exit;
pub mod predictions;
