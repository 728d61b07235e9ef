//! Experiment configuration: a flat TOML file whose keys map one-to-one
//! onto [`ExperimentConfig`] fields. Missing keys take their defaults and
//! unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::energy::CostScales;
use crate::error::{Error, Result};
use crate::rng::mix_seed;
use crate::selection::Strategy;
use crate::similarity::{ClusterSpace, Metric};

/// Cost multipliers chosen by `experiments::calibrate` with its default
/// grid, seeds 0..5 and the default synthetic setup.
pub const DEFAULT_SCALES: CostScales = CostScales {
    r_scale: 0.006,
    s_scale: 0.12,
    a_scale: 0.02,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(alias = "K")]
    pub client_count: usize,
    #[serde(alias = "C")]
    pub fraction: f64,
    pub strategy: Strategy,
    #[serde(alias = "E")]
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_rounds: usize,
    #[serde(alias = "delta")]
    pub critical_level: f64,
    pub dead_fraction_stop: f64,
    #[serde(alias = "k")]
    pub cluster_count: usize,
    pub w_maj: f64,
    pub metric: Metric,
    pub cluster_space: ClusterSpace,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub low_power_fraction: f64,
    pub r_scale: f64,
    pub s_scale: f64,
    pub a_scale: f64,
    /// Hidden layer widths of the MLP.
    pub hidden_layers: Vec<usize>,
    /// Clients receiving a label-sorted shard; the rest get the majority class.
    /// Defaults to half the clients.
    pub shard_clients: Option<usize>,
    pub shard_size: usize,
    pub majority_class: usize,
    /// Rebuild the similarity matrix from the final global model (no battery cost).
    pub diagnostic_final_matrix: bool,

    pub dataset: DatasetKind,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    pub mnist_test_images: Option<PathBuf>,
    pub mnist_test_labels: Option<PathBuf>,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_per_class: usize,
    pub synthetic_spread: f64,
    /// Share of samples held out for the central test set when no test files exist.
    pub holdout_fraction: f64,

    pub data_seed: u64,
    pub partition_seed: u64,
    pub init_seed: u64,
    pub battery_seed: u64,
    pub selection_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            client_count: 40,
            fraction: 0.05,
            strategy: Strategy::FedLe,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.03,
            max_rounds: 50,
            critical_level: 0.2,
            dead_fraction_stop: 0.5,
            cluster_count: 3,
            w_maj: 0.2,
            metric: Metric::Cosine,
            cluster_space: ClusterSpace::Embedding,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-9,
            low_power_fraction: 0.5,
            r_scale: DEFAULT_SCALES.r_scale,
            s_scale: DEFAULT_SCALES.s_scale,
            a_scale: DEFAULT_SCALES.a_scale,
            hidden_layers: vec![32],
            shard_clients: None,
            shard_size: 3000,
            majority_class: 0,
            diagnostic_final_matrix: false,
            dataset: DatasetKind::Synthetic,
            mnist_images: None,
            mnist_labels: None,
            mnist_test_images: None,
            mnist_test_labels: None,
            synthetic_classes: 10,
            synthetic_dim: 20,
            synthetic_per_class: 300,
            synthetic_spread: 0.25,
            holdout_fraction: 0.2,
            data_seed: 0,
            partition_seed: 0,
            init_seed: 0,
            battery_seed: 0,
            selection_seed: 0,
        };
        cfg.set_seed(0);
        cfg
    }
}

impl ExperimentConfig {
    /// Clients per round: `max(1, round(K * C))`.
    pub fn clients_per_round(&self) -> usize {
        ((self.client_count as f64 * self.fraction).round() as usize).max(1)
    }

    pub fn shard_clients(&self) -> usize {
        self.shard_clients.unwrap_or(self.client_count / 2)
    }

    pub fn scales(&self) -> CostScales {
        CostScales {
            r_scale: self.r_scale,
            s_scale: self.s_scale,
            a_scale: self.a_scale,
        }
    }

    pub fn set_scales(&mut self, scales: CostScales) {
        self.r_scale = scales.r_scale;
        self.s_scale = scales.s_scale;
        self.a_scale = scales.a_scale;
    }

    /// Derives the partition, init, battery and selection seeds from one
    /// run seed. The dataset seed is left alone so runs share data.
    pub fn set_seed(&mut self, seed: u64) {
        self.partition_seed = mix_seed(&[seed, 1]);
        self.init_seed = mix_seed(&[seed, 2]);
        self.battery_seed = mix_seed(&[seed, 3]);
        self.selection_seed = mix_seed(&[seed, 4]);
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.set_seed(seed);
        self
    }

    /// `[input_dim, hidden..., classes]` for a dataset of the given shape.
    pub fn layer_dims(&self, input_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(&self.hidden_layers);
        dims.push(classes);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::InvalidConfig(format!("{key}: {why}")));
        if self.client_count < 2 {
            return bad("client_count", format!("K must be >= 2, got {}", self.client_count));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("fraction", format!("C ∈ (0,1] required, got {}", self.fraction));
        }
        if self.max_rounds < 1 {
            return bad("max_rounds", "must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", format!("must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.critical_level) {
            return bad("critical_level", format!("δ must lie in [0,1), got {}", self.critical_level));
        }
        if !(self.dead_fraction_stop > 0.0 && self.dead_fraction_stop <= 1.0) {
            return bad(
                "dead_fraction_stop",
                format!("must lie in (0,1], got {}", self.dead_fraction_stop),
            );
        }
        if self.cluster_count < 1 || self.cluster_count > self.client_count {
            return bad(
                "cluster_count",
                format!("k must satisfy 1 <= k <= K, got {}", self.cluster_count),
            );
        }
        if !(0.0..=1.0).contains(&self.w_maj) {
            return bad("w_maj", format!("must lie in [0,1], got {}", self.w_maj));
        }
        if !(0.0..=1.0).contains(&self.low_power_fraction) {
            return bad(
                "low_power_fraction",
                format!("must lie in [0,1], got {}", self.low_power_fraction),
            );
        }
        for (key, v) in [
            ("r_scale", self.r_scale),
            ("s_scale", self.s_scale),
            ("a_scale", self.a_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return bad(key, format!("must be > 0, got {v}"));
            }
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden_layers", "widths must be positive".into());
        }
        if self.shard_clients() > self.client_count {
            return bad("shard_clients", "cannot exceed client_count".into());
        }
        if self.clients_per_round() > self.client_count {
            return bad("fraction", "selects more clients than exist".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction", "must lie in (0,1)".into());
        }
        match self.dataset {
            DatasetKind::Mnist => {
                if self.mnist_images.is_none() || self.mnist_labels.is_none() {
                    return bad(
                        "dataset",
                        "mnist needs mnist_images and mnist_labels".into(),
                    );
                }
                if self.mnist_test_images.is_some() != self.mnist_test_labels.is_some() {
                    return bad(
                        "mnist_test_images",
                        "test images and labels must be given together".into(),
                    );
                }
            }
            DatasetKind::Synthetic => {
                if self.synthetic_classes < 2 || self.synthetic_dim < 1 || self.synthetic_per_class < 1 {
                    return bad("synthetic_classes", "need >= 2 classes, dim >= 1, per_class >= 1".into());
                }
                if !(self.synthetic_spread > 0.0) {
                    return bad("synthetic_spread", "must be > 0".into());
                }
            }
        }
        Ok(())
    }

    /// Parses and validates a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads, defaults and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_toml_str(&text)
}
