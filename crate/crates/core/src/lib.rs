//! Measurement and remediation of equality-of-opportunity violations in
//! score-producing text classifiers.
//!
//! - [`dataset`]: loading and binarizing instance data
//! - [`prompting`]: zero-shot prompts and the external scorer boundary
//! - [`metrics`]: FPR, FPR ratio, ROC AUC
//! - [`fairloss`]: link functions, KL, cross entropy, MMD
//! - [`training`]: in-processing heads and post-processing delta models
//! - [`harness`]: synthetic data, sweeps, Pareto frontiers, reports

pub mod config;
pub mod dataset;
pub mod fairloss;
pub mod harness;
pub mod metrics;
pub mod prompting;
pub mod training;
