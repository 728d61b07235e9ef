//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fedle_core::data::{gen_synthetic, Dataset};
use fedle_core::energy::BatteryParams;
use fedle_core::engine::local_train;
use fedle_core::nn::{self, Batch, ModelParams};
use fedle_core::selection::WEIGHT_FLOOR;
use fedle_core::similarity::ClusterModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mean cross-entropy by direct evaluation: softmax over `forward` logits.
pub fn direct_loss(model: &ModelParams, batch: &Batch) -> f64 {
    let logits = nn::forward(model, &batch.inputs).unwrap();
    let mut total = 0.0;
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / batch.len() as f64
}

fn param_mut(m: &mut ModelParams, layer: usize, j: usize) -> &mut f64 {
    let l = &mut m.layers[layer];
    let n_w = l.weights.len();
    if j < n_w {
        &mut l.weights[j]
    } else {
        &mut l.bias[j - n_w]
    }
}

/// Central finite differences of `direct_loss` for every parameter, in the
/// order of `ModelParams::flatten`.
pub fn numeric_grad(model: &ModelParams, batch: &Batch, eps: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut probe = model.clone();
    for l in 0..model.layers.len() {
        let count = model.layers[l].weights.len() + model.layers[l].bias.len();
        for j in 0..count {
            let orig = *param_mut(&mut probe, l, j);
            *param_mut(&mut probe, l, j) = orig + eps;
            let up = direct_loss(&probe, batch);
            *param_mut(&mut probe, l, j) = orig - eps;
            let down = direct_loss(&probe, batch);
            *param_mut(&mut probe, l, j) = orig;
            out.push((up - down) / (2.0 * eps));
        }
    }
    out
}

/// Largest elementwise relative error, `|a-n| / max(|a|, |n|)`, ignoring
/// entries where both sides are below `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) >= floor)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

/// Smallest |pre-activation| over all hidden units and rows. Central
/// differences are only meaningful away from the ReLU kink.
pub fn relu_margin(model: &ModelParams, batch: &Batch) -> f64 {
    let mut margin = f64::INFINITY;
    for r in 0..batch.len() {
        let mut act: Vec<f64> = batch.inputs.row(r).to_vec();
        for layer in &model.layers[..model.layers.len() - 1] {
            act = (0..layer.outputs)
                .map(|o| {
                    let z = layer.bias[o]
                        + (0..layer.inputs)
                            .map(|i| layer.weights[o * layer.inputs + i] * act[i])
                            .sum::<f64>();
                    margin = margin.min(z.abs());
                    z.max(0.0)
                })
                .collect();
        }
    }
    margin
}

/// Inputs for a selection oracle context.
#[derive(Debug, Clone)]
pub struct OracleCtx {
    pub alive: Vec<usize>,
    pub levels: Vec<f64>,
    pub params: Vec<BatteryParams>,
    pub capacities: Vec<u64>,
    pub labels: Option<Vec<usize>>,
    pub majority: usize,
    pub m: usize,
    pub critical: f64,
    pub w_maj: f64,
}

/// Exact probability of every ordered selection sequence.
fn sequences(
    pools: &[Vec<(usize, f64)>],
    pool_weight: &dyn Fn(usize, &[Vec<(usize, f64)>]) -> f64,
    m: usize,
    prefix: &mut Vec<usize>,
    p: f64,
    out: &mut BTreeMap<Vec<usize>, f64>,
) {
    if prefix.len() == m {
        let mut key = prefix.clone();
        key.sort_unstable();
        *out.entry(key).or_default() += p;
        return;
    }
    let mut pw: Vec<f64> = (0..pools.len())
        .map(|c| if pools[c].is_empty() { 0.0 } else { pool_weight(c, pools) })
        .collect();
    if pw.iter().sum::<f64>() <= 0.0 {
        pw = pools.iter().map(|q| if q.is_empty() { 0.0 } else { 1.0 }).collect();
    }
    let total: f64 = pw.iter().sum();
    for c in 0..pools.len() {
        if pw[c] == 0.0 {
            continue;
        }
        let inner: f64 = pools[c].iter().map(|(_, w)| w).sum();
        for i in 0..pools[c].len() {
            let (id, w) = pools[c][i];
            let mut rest = pools.to_vec();
            rest[c].remove(i);
            prefix.push(id);
            sequences(&rest, pool_weight, m, prefix, p * pw[c] / total * w / inner, out);
            prefix.pop();
        }
    }
}

fn candidates(ctx: &OracleCtx) -> Vec<usize> {
    ctx.alive
        .iter()
        .copied()
        .filter(|&id| ctx.levels[id] > ctx.critical)
        .collect()
}

/// Uniform: every m-subset of the candidates is equally likely.
pub fn uniform_distribution(ctx: &OracleCtx) -> BTreeMap<Vec<usize>, f64> {
    let pool: Vec<(usize, f64)> = candidates(ctx).into_iter().map(|id| (id, 1.0)).collect();
    let mut out = BTreeMap::new();
    sequences(&[pool], &|_, _| 1.0, ctx.m, &mut Vec::new(), 1.0, &mut out);
    out
}

/// Capacity-weighted sequential sampling; zero capacities weigh the floor,
/// all-zero falls back to uniform.
pub fn capacity_distribution(ctx: &OracleCtx) -> BTreeMap<Vec<usize>, f64> {
    let cand = candidates(ctx);
    if cand.iter().all(|&id| ctx.capacities[id] == 0) {
        return uniform_distribution(ctx);
    }
    let pool: Vec<(usize, f64)> = cand
        .into_iter()
        .map(|id| {
            let c = ctx.capacities[id];
            (id, if c == 0 { WEIGHT_FLOOR } else { c as f64 })
        })
        .collect();
    let mut out = BTreeMap::new();
    sequences(&[pool], &|_, _| 1.0, ctx.m, &mut Vec::new(), 1.0, &mut out);
    out
}

/// Cluster-then-client sequential sampling.
pub fn cluster_distribution(ctx: &OracleCtx) -> BTreeMap<Vec<usize>, f64> {
    let labels = ctx.labels.as_ref().expect("cluster labels");
    let k = labels.iter().max().unwrap() + 1;
    let mut pools = vec![Vec::new(); k.max(ctx.majority + 1)];
    for id in candidates(ctx) {
        pools[labels[id]].push((id, (ctx.levels[id] - ctx.critical).max(WEIGHT_FLOOR)));
    }
    let majority = ctx.majority;
    let w_maj = ctx.w_maj;
    let mut out = BTreeMap::new();
    sequences(
        &pools,
        &|c, _| if c == majority { w_maj } else { 1.0 },
        ctx.m,
        &mut Vec::new(),
        1.0,
        &mut out,
    );
    out
}

/// Hand-built cluster model with the given labels (centroids are unused by selection).
pub fn cluster_model(labels: &[usize], majority: usize) -> ClusterModel {
    let k = labels.iter().max().map_or(1, |m| m + 1).max(majority + 1);
    ClusterModel {
        labels: labels.to_vec(),
        centroids: vec![vec![0.0, 0.0]; k],
        majority_cluster: majority,
        anchor_pair: (0, 1),
        points: vec![vec![0.0, 0.0]; labels.len()],
    }
}

/// Six clients over six synthetic classes: clients `2p` and `2p+1` both
/// hold classes `2p` and `2p+1`, each seeing a disjoint half of the samples.
pub fn six_client_setup(seed: u64) -> (Dataset, Vec<Vec<usize>>) {
    let ds = gen_synthetic(6, 8, 40, 0.1, seed).unwrap();
    let mut clients = vec![Vec::new(); 6];
    for (i, &y) in ds.labels.iter().enumerate() {
        let pair = y / 2;
        clients[2 * pair + (i % 2)].push(i);
    }
    (ds, clients)
}

/// Trains every client one epoch from a shared init; returns
/// `(partial vectors, full vectors)`.
pub fn one_epoch_vectors(
    ds: &Dataset,
    clients: &[Vec<usize>],
    dims: &[usize],
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let init = nn::init_model(dims, seed).unwrap();
    let mut partial = Vec::new();
    let mut full = Vec::new();
    for (id, idx) in clients.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((id as u64 + 1) * 0x9E37));
        let u = local_train(ds, idx, &init, 1, 0.1, 8, &mut rng).unwrap();
        partial.push(nn::flatten_partial(&u.model));
        full.push(u.model.flatten());
    }
    (partial, full)
}

/// True when every group of clients holding the same single class lies in
/// one cluster. Groups of size one are trivially together.
pub fn same_class_groups_together(client_labels: &[Vec<usize>], clusters: &[usize]) -> bool {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (id, labels) in client_labels.iter().enumerate() {
        if let [only] = labels.as_slice() {
            groups.entry(*only).or_default().push(id);
        }
    }
    groups
        .values()
        .all(|ids| ids.iter().all(|&i| clusters[i] == clusters[ids[0]]))
}
