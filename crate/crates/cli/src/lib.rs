//! Experiment runner for the mean field game solvers: configuration files,
//! orchestration of each experiment kind, CSV artifacts and the acceptance
//! suite.

pub mod acceptance;
pub mod config;
pub mod error;
pub mod output;
pub mod plotdata;
pub mod run;
