//! Battery-constrained federated learning simulator.
//!
//! Clients train a small MLP on non-IID data and drain a battery every
//! round. Three selection policies are provided: uniform over live clients
//! (FedAvg-B), initial-capacity weighted (FedBO), and FedLE, which clusters
//! clients once by the similarity of their partially uploaded weights and
//! then samples clusters (majority cluster down-weighted) and clients within
//! a cluster by remaining battery.

pub mod config;
pub mod data;
pub mod energy;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod report;
mod rng;
pub mod selection;
pub mod similarity;

pub use config::{parse_config, DatasetKind, ExperimentConfig};
pub use energy::{BatteryParams, BatteryState, CostScales, PowerRole};
pub use engine::{run_experiment, ExperimentHistory, PreparedData, RoundRecord, RunMode};
pub use error::{Error, Result};
pub use nn::{Batch, Matrix, ModelParams};
pub use selection::Strategy;
pub use similarity::{ClusterModel, Metric, SimilarityMatrix};
