//! Client selection policies: uniform over live clients (FedAvg-B),
//! capacity-weighted (FedBO), and cluster-then-battery weighted (FedLE).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::BatteryParams;
use crate::error::{Error, Result};
use crate::similarity::ClusterModel;

/// Floor weight for clients that would otherwise have weight zero.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fedavg_b")]
    FedAvgB,
    #[serde(rename = "fedbo")]
    FedBo,
    #[serde(rename = "fedle")]
    FedLe,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::FedLe, Strategy::FedAvgB, Strategy::FedBo];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::FedAvgB => "fedavg_b",
            Strategy::FedBo => "fedbo",
            Strategy::FedLe => "fedle",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Strategy::FedAvgB => "FedAvg-B",
            Strategy::FedBo => "FedBO",
            Strategy::FedLe => "FedLE",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg_b" => Ok(Strategy::FedAvgB),
            "fedbo" => Ok(Strategy::FedBo),
            "fedle" => Ok(Strategy::FedLe),
            other => Err(Error::InvalidConfig(format!(
                "unknown strategy {other:?} (expected fedavg_b, fedbo or fedle)"
            ))),
        }
    }
}

/// Everything a policy may look at when picking this round's clients.
#[derive(Debug, Clone, Copy)]
pub struct SelectionContext<'a> {
    pub round: usize,
    /// Ids of clients still participating.
    pub alive: &'a [usize],
    /// Current level of every client, indexed by client id.
    pub battery_levels: &'a [f64],
    pub battery_params: &'a [BatteryParams],
    pub clusters: Option<&'a ClusterModel>,
    /// Clients per round.
    pub m: usize,
    pub critical: f64,
    /// Relative weight of the majority cluster.
    pub w_maj: f64,
}

impl SelectionContext<'_> {
    /// Live clients strictly above the critical level, in `alive` order.
    fn candidates(&self) -> Result<Vec<usize>> {
        if self.m == 0 {
            return Err(Error::InvalidConfig("clients per round must be >= 1".into()));
        }
        let c: Vec<usize> = self
            .alive
            .iter()
            .copied()
            .filter(|&id| self.battery_levels[id] > self.critical)
            .collect();
        if c.len() < self.m {
            return Err(Error::InsufficientClients {
                alive: c.len(),
                needed: self.m,
            });
        }
        Ok(c)
    }
}

/// Index drawn with probability proportional to `weights`.
pub fn weighted_draw(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = i;
        if u < w {
            return i;
        }
        u -= w;
    }
    last
}

/// Sequential weighted sampling without replacement.
fn draw_without_replacement(
    ids: &[usize],
    mut weights: Vec<f64>,
    m: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(m);
    for _ in 0..m {
        let i = weighted_draw(&weights, rng);
        out.push(ids[i]);
        weights[i] = 0.0;
    }
    out
}

pub fn select_uniform(ctx: &SelectionContext<'_>, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let candidates = ctx.candidates()?;
    Ok(rand::seq::index::sample(rng, candidates.len(), ctx.m)
        .into_iter()
        .map(|i| candidates[i])
        .collect())
}

/// Number of selected rounds a client could survive from its initial level.
pub fn capacity(params: &BatteryParams, critical: f64) -> u64 {
    let headroom = params.b0 - critical;
    let cost = params.round_cost();
    if headroom <= 0.0 || cost <= 0.0 {
        return 0;
    }
    (headroom / cost).floor() as u64
}

/// Weighted by `capacities[id]` (indexed by client id).
pub fn select_battery_only(
    ctx: &SelectionContext<'_>,
    capacities: &[u64],
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let candidates = ctx.candidates()?;
    if candidates.iter().all(|&id| capacities[id] == 0) {
        return select_uniform(ctx, rng);
    }
    let weights = candidates
        .iter()
        .map(|&id| match capacities[id] {
            0 => WEIGHT_FLOOR,
            c => c as f64,
        })
        .collect();
    Ok(draw_without_replacement(&candidates, weights, ctx.m, rng))
}

/// Picks a cluster (majority weighted `w_maj`, others 1), then a client in
/// it weighted by battery headroom above the critical level. Repeats `m`
/// times without replacement.
pub fn select_fedle(ctx: &SelectionContext<'_>, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let clusters = ctx.clusters.ok_or_else(|| {
        Error::ContractViolation("FedLE selection needs a cluster model".into())
    })?;
    let candidates = ctx.candidates()?;
    let k = clusters.cluster_count();
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &id in &candidates {
        pools[clusters.labels[id]].push(id);
    }

    let mut out = Vec::with_capacity(ctx.m);
    for _ in 0..ctx.m {
        let mut cluster_w: Vec<f64> = pools
            .iter()
            .enumerate()
            .map(|(c, pool)| match (pool.is_empty(), c == clusters.majority_cluster) {
                (true, _) => 0.0,
                (false, true) => ctx.w_maj,
                (false, false) => 1.0,
            })
            .collect();
        if cluster_w.iter().sum::<f64>() <= 0.0 {
            for (w, pool) in cluster_w.iter_mut().zip(&pools) {
                *w = if pool.is_empty() { 0.0 } else { 1.0 };
            }
        }
        let c = weighted_draw(&cluster_w, rng);
        let pool = &mut pools[c];
        let weights: Vec<f64> = pool
            .iter()
            .map(|&id| (ctx.battery_levels[id] - ctx.critical).max(WEIGHT_FLOOR))
            .collect();
        let i = weighted_draw(&weights, rng);
        out.push(pool.remove(i));
    }
    Ok(out)
}

pub fn select(
    strategy: Strategy,
    ctx: &SelectionContext<'_>,
    capacities: &[u64],
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    match strategy {
        Strategy::FedAvgB => select_uniform(ctx, rng),
        Strategy::FedBo => select_battery_only(ctx, capacities, rng),
        Strategy::FedLe => select_fedle(ctx, rng),
    }
}
