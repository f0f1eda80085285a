//! Command-line tooling: dataset generation, training, editing,
//! evaluation, reports and the end-to-end experiment.

pub mod commands;
pub mod experiment;
pub mod output;
pub mod report;
