//! Simulator for hybrid federated learning in a cellular edge cell: a
//! FedCS-style client scheduler extended with raw-data uploads from a
//! small set of consenting clients, so that the server can train on an
//! approximately class-balanced dataset and aggregate that model with the
//! clients' models.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod learner;
pub mod netcomp;
pub mod partitioner;
pub mod report;
pub mod scheduler;
pub mod seed;

pub use config::{load_config, ExperimentConfig, Method, Protocol, Seeds, SweepAxis, SweepSpec};
pub use dataset::Dataset;
pub use engine::{run_experiment, run_trial, ExperimentResult, RoundRecord, TrialResult};
pub use error::{Error, Result};
