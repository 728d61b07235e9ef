//! Shared fixtures for the criterion benchmarks.

use fedle_core::engine::{prepare_data, PreparedData};
use fedle_core::ExperimentConfig;

/// The default 40-client synthetic setup.
pub fn default_setup(seed: u64) -> (ExperimentConfig, PreparedData) {
    let cfg = ExperimentConfig::default().with_seed(seed);
    let data = prepare_data(&cfg).expect("default config prepares");
    (cfg, data)
}

/// Deterministic pseudo-random vectors for similarity benchmarks.
pub fn weight_vectors(count: usize, len: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|c| {
            (0..len)
                .map(|i| (((c * 7919 + i * 104_729) % 1000) as f64 / 500.0) - 1.0)
                .collect()
        })
        .collect()
}
