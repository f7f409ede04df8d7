//! Experiment harness for the kinetic Fokker-Planck toolkit: validated
//! flat configs, a registry of quantitative experiments, atomically
//! written run manifests, and an aggregating reporter.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod report;
