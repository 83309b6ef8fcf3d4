//! Deterministic simulation of federated multi-label training across clients
//! that each annotate a different subset of classes.
//!
//! Clients share a feature extractor and hold a classification head over
//! their own classes only. Each round the server averages the feature
//! extractor and merges heads class by class, so a class is averaged only
//! over the clients that label it.

pub mod aggregation;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod seeds;
pub mod simulator;
pub mod suite;
pub mod tensor;

pub use config::{ExperimentConfig, Method};
pub use error::{Error, Result};
pub use simulator::{run, run_baseline, run_surgical, RunOptions, RunOutcome, Simulation};
