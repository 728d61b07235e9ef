//! Multi-run drivers: strategy comparisons over seeds, cluster-count sweeps
//! and the battery-cost calibration grid search, plus the small statistics
//! used to summarize them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::energy::CostScales;
use crate::engine::{prepare_data, run_with_data, ExperimentHistory, PreparedData, RunMode};
use crate::error::{Error, Result};
use crate::selection::Strategy;

/// Median of a non-empty slice; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pearson correlation; `NaN` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "pearson inputs differ in length");
    let (ma, mb) = (mean(a), mean(b));
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Adjusted Rand index between two labelings of the same items.
/// Two single-cluster labelings score 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&c| pairs(c)).sum();
    let rows: f64 = table.iter().map(|r| pairs(r.iter().sum())).sum();
    let cols: f64 = (0..kb)
        .map(|j| pairs(table.iter().map(|r| r[j]).sum()))
        .sum();
    let total = pairs(n as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Histories of one strategy across seeds, in seed order.
#[derive(Debug, Clone)]
pub struct StrategyRuns {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub histories: Vec<ExperimentHistory>,
}

impl StrategyRuns {
    pub fn median_rounds(&self) -> f64 {
        let r: Vec<f64> = self.histories.iter().map(|h| h.rounds_lasted as f64).collect();
        median(&r)
    }

    pub fn mean_final_accuracy(&self) -> f64 {
        let a: Vec<f64> = self.histories.iter().map(|h| h.final_accuracy).collect();
        mean(&a)
    }
}

fn prepare_per_seed(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<PreparedData>> {
    seeds
        .par_iter()
        .map(|&s| prepare_data(&cfg.clone().with_seed(s)))
        .collect()
}

/// Runs every strategy on every seed. Seeds share data, partition and
/// batteries across strategies. Runs execute on the current rayon pool;
/// results come back in (strategy, seed) order regardless of scheduling.
pub fn compare(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    mode: RunMode,
) -> Result<Vec<StrategyRuns>> {
    if strategies.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "comparison needs at least one strategy and one seed".into(),
        ));
    }
    cfg.validate()?;
    let data = prepare_per_seed(cfg, seeds)?;
    let jobs: Vec<(Strategy, usize)> = strategies
        .iter()
        .flat_map(|&st| (0..seeds.len()).map(move |i| (st, i)))
        .collect();
    let mut results = jobs
        .par_iter()
        .map(|&(strategy, i)| {
            let mut run_cfg = cfg.clone().with_seed(seeds[i]);
            run_cfg.strategy = strategy;
            run_with_data(&run_cfg, &data[i], mode)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    Ok(strategies
        .iter()
        .map(|&strategy| StrategyRuns {
            strategy,
            seeds: seeds.to_vec(),
            histories: results.by_ref().take(seeds.len()).collect(),
        })
        .collect())
}

/// FedLE runs for one cluster count.
#[derive(Debug, Clone)]
pub struct SweepGroup {
    pub k: usize,
    pub runs: StrategyRuns,
}

/// FedLE over each `k`, with identical data, partition and battery seeds so
/// runs differ only through clustering.
pub fn sweep_clusters(
    cfg: &ExperimentConfig,
    k_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepGroup>> {
    if k_values.is_empty() {
        return Err(Error::InvalidConfig("k sweep needs at least one value".into()));
    }
    for &k in k_values {
        if k < 1 || k > cfg.client_count {
            return Err(Error::InvalidConfig(format!(
                "k_values: k must satisfy 1 <= k <= K, got {k}"
            )));
        }
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("k sweep needs at least one seed".into()));
    }
    cfg.validate()?;
    let data = prepare_per_seed(cfg, seeds)?;
    let jobs: Vec<(usize, usize)> = k_values
        .iter()
        .flat_map(|&k| (0..seeds.len()).map(move |i| (k, i)))
        .collect();
    let mut results = jobs
        .par_iter()
        .map(|&(k, i)| {
            let mut run_cfg = cfg.clone().with_seed(seeds[i]);
            run_cfg.strategy = Strategy::FedLe;
            run_cfg.cluster_count = k;
            run_with_data(&run_cfg, &data[i], RunMode::Full)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    Ok(k_values
        .iter()
        .map(|&k| SweepGroup {
            k,
            runs: StrategyRuns {
                strategy: Strategy::FedLe,
                seeds: seeds.to_vec(),
                histories: results.by_ref().take(seeds.len()).collect(),
            },
        })
        .collect())
}

/// Candidate values per scale; searched as a full Cartesian product in
/// `r`-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub r_scale: Vec<f64>,
    pub s_scale: Vec<f64>,
    pub a_scale: Vec<f64>,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            r_scale: vec![0.004, 0.006, 0.008, 0.01],
            s_scale: vec![0.06, 0.08, 0.1, 0.12, 0.14],
            a_scale: vec![0.01, 0.02],
        }
    }
}

impl CalibrationGrid {
    pub fn single(scales: CostScales) -> Self {
        Self {
            r_scale: vec![scales.r_scale],
            s_scale: vec![scales.s_scale],
            a_scale: vec![scales.a_scale],
        }
    }

    pub fn points(&self) -> Vec<CostScales> {
        let mut out = Vec::new();
        for &r_scale in &self.r_scale {
            for &s_scale in &self.s_scale {
                for &a_scale in &self.a_scale {
                    out.push(CostScales {
                        r_scale,
                        s_scale,
                        a_scale,
                    });
                }
            }
        }
        out
    }
}

/// Median lifespans the calibration aims for, and the accepted FedAvg-B window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    pub fedavg_b: f64,
    pub fedbo: f64,
    pub fedavg_b_window: (f64, f64),
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            fedavg_b: 44.0,
            fedbo: 50.0,
            fedavg_b_window: (40.0, 46.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub scales: CostScales,
    pub fedavg_b_median: f64,
    pub fedbo_median: f64,
    /// `|FedAvg-B - target| + |FedBO - target|`; lower is better.
    pub score: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub best: CalibrationPoint,
    pub points: Vec<CalibrationPoint>,
    pub seeds: Vec<u64>,
    pub targets: CalibrationTargets,
}

impl CalibrationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// TOML fragment holding the chosen scales, loadable as a config.
    pub fn to_toml(&self) -> String {
        let s = self.best.scales;
        format!(
            "# median rounds: fedavg_b {}, fedbo {} (score {})\nr_scale = {:?}\ns_scale = {:?}\na_scale = {:?}\n",
            self.best.fedavg_b_median, self.best.fedbo_median, self.best.score,
            s.r_scale, s.s_scale, s.a_scale
        )
    }
}

/// Grid search over cost scales using energy-only FedAvg-B and FedBO runs.
///
/// A point is feasible when the FedAvg-B median lies in the target window
/// and the FedBO median reaches `max_rounds`. Returns the feasible point with
/// the lowest score (ties to the earliest in grid order), or a calibration
/// error naming the best infeasible candidate.
pub fn calibrate(
    cfg: &ExperimentConfig,
    grid: &CalibrationGrid,
    seeds: &[u64],
    targets: CalibrationTargets,
) -> Result<CalibrationReport> {
    let candidates = grid.points();
    if candidates.is_empty() {
        return Err(Error::InvalidConfig("calibration grid is empty".into()));
    }
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("calibration needs at least one seed".into()));
    }
    cfg.validate()?;
    let data = prepare_per_seed(cfg, seeds)?;
    let points = candidates
        .par_iter()
        .map(|&scales| {
            let mut medians = [0.0; 2];
            for (slot, strategy) in [Strategy::FedAvgB, Strategy::FedBo].into_iter().enumerate() {
                let mut rounds = Vec::with_capacity(seeds.len());
                for (i, &seed) in seeds.iter().enumerate() {
                    let mut run_cfg = cfg.clone().with_seed(seed);
                    run_cfg.strategy = strategy;
                    run_cfg.set_scales(scales);
                    let h = run_with_data(&run_cfg, &data[i], RunMode::EnergyOnly)?;
                    rounds.push(h.rounds_lasted as f64);
                }
                medians[slot] = median(&rounds);
            }
            let [b, bo] = medians;
            let (lo, hi) = targets.fedavg_b_window;
            Ok(CalibrationPoint {
                scales,
                fedavg_b_median: b,
                fedbo_median: bo,
                score: (b - targets.fedavg_b).abs() + (bo - targets.fedbo).abs(),
                feasible: (lo..=hi).contains(&b) && bo >= cfg.max_rounds as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pick = |feasible_only: bool| {
        points
            .iter()
            .filter(|p| p.feasible || !feasible_only)
            .fold(None::<&CalibrationPoint>, |best, p| match best {
                Some(b) if b.score <= p.score => Some(b),
                _ => Some(p),
            })
            .copied()
    };
    match pick(true) {
        Some(best) => Ok(CalibrationReport {
            best,
            points,
            seeds: seeds.to_vec(),
            targets,
        }),
        None => {
            let b = pick(false).expect("grid is non-empty");
            Err(Error::Calibration(format!(
                "no grid point meets the targets; best candidate r_scale={} s_scale={} a_scale={} \
                 gives fedavg_b median {} and fedbo median {} (score {})",
                b.scales.r_scale,
                b.scales.s_scale,
                b.scales.a_scale,
                b.fedavg_b_median,
                b.fedbo_median,
                b.score
            )))
        }
    }
}
