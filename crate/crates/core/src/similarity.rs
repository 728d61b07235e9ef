//! Client similarity matrix, lowest-similarity anchor pair, 2-D embedding and
//! K-means clustering.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Dot,
    Cosine,
}

/// What K-means clusters: the 2-D anchor embedding or full similarity rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSpace {
    Embedding,
    Rows,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    /// `K x K`, row-major, symmetric.
    pub scores: Vec<Vec<f64>>,
    pub row_sums: Vec<f64>,
    pub metric: Metric,
}

impl SimilarityMatrix {
    pub fn size(&self) -> usize {
        self.scores.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.scores[i][j]
    }

    /// Upper-triangle entries (i < j), row by row.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let k = self.size();
        let mut out = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in i + 1..k {
                out.push(self.scores[i][j]);
            }
        }
        out
    }

    /// CSV with a header row of client ids and one row per client.
    pub fn to_csv(&self) -> String {
        let k = self.size();
        let mut out = String::from("client");
        for j in 0..k {
            let _ = write!(out, ",{j}");
        }
        out.push('\n');
        for (i, row) in self.scores.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pairwise inner products (or cosines) of the clients' weight vectors.
pub fn build_similarity_matrix(vectors: &[Vec<f64>], metric: Metric) -> Result<SimilarityMatrix> {
    let k = vectors.len();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "similarity needs at least 2 clients, got {k}"
        )));
    }
    let len = vectors[0].len();
    if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != len) {
        return Err(Error::Shape(format!(
            "client {i} vector has length {}, client 0 has {len}",
            v.len()
        )));
    }
    let norms: Vec<f64> = vectors.iter().map(|v| dot(v, v).sqrt()).collect();
    if metric == Metric::Cosine {
        if let Some(client) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::DegenerateVector { client });
        }
    }

    let mut scores = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let raw = dot(&vectors[i], &vectors[j]);
            let v = match metric {
                Metric::Dot => raw,
                Metric::Cosine if i == j => 1.0,
                Metric::Cosine => (raw / (norms[i] * norms[j])).clamp(-1.0, 1.0),
            };
            scores[i][j] = v;
            scores[j][i] = v;
        }
    }
    let row_sums = scores.iter().map(|r| r.iter().sum()).collect();
    Ok(SimilarityMatrix {
        scores,
        row_sums,
        metric,
    })
}

/// Off-diagonal argmin `(alpha, beta)` with `alpha < beta`; ties go to the
/// lexicographically smallest pair.
pub fn lowest_pair(matrix: &SimilarityMatrix) -> (usize, usize) {
    let k = matrix.size();
    let mut best = (0, 1);
    let mut best_v = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            let v = matrix.scores[i][j];
            if v < best_v {
                best_v = v;
                best = (i, j);
            }
        }
    }
    best
}

/// Each client's similarity to the two anchors.
pub fn embed_clients(matrix: &SimilarityMatrix, alpha: usize, beta: usize) -> Vec<[f64; 2]> {
    matrix
        .scores
        .iter()
        .map(|row| [row[alpha], row[beta]])
        .collect()
}

/// Most populated cluster; ties go to the lowest index.
pub fn majority_cluster(labels: &[usize]) -> usize {
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sum of squared distances after each assignment step.
    pub objective_trace: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

fn objective(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum()
}

fn means(points: &[Vec<f64>], labels: &[usize], previous: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let k = previous.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .zip(previous)
        .map(|((s, n), prev)| {
            if n == 0 {
                prev.clone()
            } else {
                s.into_iter().map(|v| v / n as f64).collect()
            }
        })
        .collect()
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Moves, for every empty cluster, the point farthest from its centroid
/// (taken from a cluster with at least two members) into it.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        for &l in labels.iter() {
            counts[l] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            if counts[labels[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[labels[i]]);
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        labels[i] = empty;
        centroids[empty] = points[i].clone();
    }
}

/// Lloyd's algorithm from k-means++ seeding. Stops at an assignment
/// fixpoint, when no centroid moves more than `tol`, or after `max_iters`.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "cluster count k={k} must satisfy 1 <= k <= {n} points"
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points of differing dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut trace = vec![objective(points, &labels, &centroids)];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        repair_empty(points, &mut labels, &mut centroids);
        let updated = means(points, &labels, &centroids);
        let shift = centroids
            .iter()
            .zip(&updated)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let changed = next != labels;
        labels = next;
        trace.push(objective(points, &labels, &centroids));
        if !changed {
            break;
        }
        if shift < tol {
            repair_empty(points, &mut labels, &mut centroids);
            centroids = means(points, &labels, &centroids);
            break;
        }
    }

    Ok(KMeansResult {
        labels,
        centroids,
        iterations,
        objective_trace: trace,
    })
}

/// Result of clustering clients once before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub majority_cluster: usize,
    pub anchor_pair: (usize, usize),
    /// Coordinates the clustering ran on (one row per client).
    pub points: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn cluster_count(&self) -> usize {
        self.centroids.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }

    /// `client,x,y,cluster` for the 2-D embedding (first two coordinates).
    pub fn embedding_csv(&self) -> String {
        let mut out = String::from("client,x,y,cluster\n");
        for (i, (p, l)) in self.points.iter().zip(&self.labels).enumerate() {
            let x = p.first().copied().unwrap_or(0.0);
            let y = p.get(1).copied().unwrap_or(0.0);
            let _ = writeln!(out, "{i},{x},{y},{l}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterOptions {
    pub k: usize,
    pub space: ClusterSpace,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

/// Anchor pair, embedding and K-means over a finished similarity matrix.
pub fn cluster_clients(matrix: &SimilarityMatrix, opts: &ClusterOptions) -> Result<ClusterModel> {
    let anchor_pair = lowest_pair(matrix);
    let points: Vec<Vec<f64>> = match opts.space {
        ClusterSpace::Embedding => embed_clients(matrix, anchor_pair.0, anchor_pair.1)
            .into_iter()
            .map(|p| p.to_vec())
            .collect(),
        ClusterSpace::Rows => matrix.scores.clone(),
    };
    let km = kmeans(&points, opts.k, opts.seed, opts.max_iters, opts.tol)?;
    Ok(ClusterModel {
        majority_cluster: majority_cluster(&km.labels),
        labels: km.labels,
        centroids: km.centroids,
        anchor_pair,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn metric_examples() {
        let m = build_similarity_matrix(&[vec![1.0, 2.0], vec![1.0, 2.0]], Metric::Cosine).unwrap();
        assert!((m.get(0, 1) - 1.0).abs() < 1e-15);
        let m = build_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], Metric::Cosine).unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        let m = build_similarity_matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]], Metric::Dot).unwrap();
        assert_eq!(m.get(0, 1), 11.0);
        assert_eq!(m.row_sums, vec![5.0 + 11.0, 11.0 + 25.0]);
    }

    #[test]
    fn metric_errors() {
        let e = build_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 0.0]], Metric::Cosine).unwrap_err();
        assert!(matches!(e, Error::DegenerateVector { client: 1 }));
        let e = build_similarity_matrix(&[vec![1.0], vec![0.0, 1.0]], Metric::Dot).unwrap_err();
        assert!(matches!(e, Error::Shape(_)));
        assert!(build_similarity_matrix(&[vec![1.0]], Metric::Dot).is_err());
    }

    fn matrix(scores: Vec<Vec<f64>>) -> SimilarityMatrix {
        let row_sums = scores.iter().map(|r| r.iter().sum()).collect();
        SimilarityMatrix {
            scores,
            row_sums,
            metric: Metric::Cosine,
        }
    }

    #[test]
    fn lowest_pair_rules() {
        let mut s = vec![vec![0.5; 6]; 6];
        for (i, row) in s.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        assert_eq!(lowest_pair(&matrix(s.clone())), (0, 1));
        s[2][5] = -0.3;
        s[5][2] = -0.3;
        assert_eq!(lowest_pair(&matrix(s)), (2, 5));
        assert_eq!(lowest_pair(&matrix(vec![vec![1.0, 0.2], vec![0.2, 1.0]])), (0, 1));
    }

    #[test]
    fn embedding_of_anchors() {
        let m = build_similarity_matrix(
            &[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]],
            Metric::Cosine,
        )
        .unwrap();
        let (a, b) = lowest_pair(&m);
        assert_eq!((a, b), (0, 2));
        let e = embed_clients(&m, a, b);
        assert_eq!(e[a], [1.0, m.get(a, b)]);
        assert_eq!(e[b], [m.get(b, a), 1.0]);

        let two = build_similarity_matrix(&[vec![1.0, 0.2], vec![0.3, 1.0]], Metric::Cosine).unwrap();
        let c = two.get(0, 1);
        assert_eq!(embed_clients(&two, 0, 1), vec![[1.0, c], [c, 1.0]]);
    }

    #[test]
    fn kmeans_examples() {
        let p = pts(&[[0.0, 0.0], [0.1, 0.0], [5.0, 5.0], [5.1, 5.0]]);
        for seed in 0..20 {
            let r = kmeans(&p, 2, seed, 100, 0.0).unwrap();
            assert_eq!(r.labels[0], r.labels[1]);
            assert_eq!(r.labels[2], r.labels[3]);
            assert_ne!(r.labels[0], r.labels[2]);
        }

        let r = kmeans(&p, 4, 3, 100, 0.0).unwrap();
        let mut l = r.labels.clone();
        l.sort_unstable();
        assert_eq!(l, vec![0, 1, 2, 3]);

        let r = kmeans(&p, 1, 3, 100, 0.0).unwrap();
        assert_eq!(r.labels, vec![0; 4]);
        assert!((r.centroids[0][0] - 2.55).abs() < 1e-12);
        assert!((r.centroids[0][1] - 2.5).abs() < 1e-12);

        assert!(matches!(kmeans(&p, 5, 0, 10, 0.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn kmeans_handles_duplicates() {
        let p = pts(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        let r = kmeans(&p, 3, 0, 10, 0.0).unwrap();
        assert_eq!(r.labels.len(), 3);
        assert!(r.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn majority_rules() {
        assert_eq!(majority_cluster(&[0, 0, 0, 1, 2]), 0);
        assert_eq!(majority_cluster(&[1, 1, 0, 0]), 0);
        assert_eq!(majority_cluster(&[2, 2]), 2);
    }

    #[test]
    fn csv_layout() {
        let m = build_similarity_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]], Metric::Cosine).unwrap();
        assert_eq!(m.to_csv(), "client,0,1\n0,1,0\n1,0,1\n");
    }
}
