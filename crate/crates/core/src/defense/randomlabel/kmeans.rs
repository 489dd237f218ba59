//! K-Means clustering and optimal cluster-to-label assignment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FeatureMatrix;

const MAX_ITER: usize = 300;
const TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k × dim`.
    pub centroids: Vec<f64>,
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, y)| (f64::from(x) - y).powi(2))
        .sum()
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Clusters ordered nearest first, for each row.
    pub fn ranked(&self, x: &FeatureMatrix) -> Vec<Vec<usize>> {
        (0..x.rows)
            .map(|i| {
                let d: Vec<f64> = (0..self.k)
                    .map(|c| sq_dist(x.row(i), self.centroid(c)))
                    .collect();
                let mut idx: Vec<usize> = (0..self.k).collect();
                idx.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
                idx
            })
            .collect()
    }

    pub fn assign(&self, x: &FeatureMatrix) -> Vec<usize> {
        self.ranked(x).into_iter().map(|r| r[0]).collect()
    }
}

fn plus_plus_init(x: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids: Vec<f64> = Vec::with_capacity(k * x.dim);
    let first = rng.random_range(0..x.rows);
    centroids.extend(x.row(first).iter().map(|&v| f64::from(v)));
    let mut nearest: Vec<f64> = (0..x.rows)
        .map(|i| sq_dist(x.row(i), &centroids[..x.dim]))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = x.rows - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if r < d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..x.rows)
        };
        centroids.extend(x.row(pick).iter().map(|&v| f64::from(v)));
        let new = &centroids[c * x.dim..(c + 1) * x.dim];
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(sq_dist(x.row(i), new));
        }
    }
    centroids
}

/// Lloyd iterations from a k-means++ start. `None` if a cluster empties.
fn lloyd(x: &FeatureMatrix, k: usize, seed: u64) -> Option<KMeans> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = KMeans {
        k,
        dim: x.dim,
        centroids: plus_plus_init(x, k, &mut rng),
    };
    for _ in 0..MAX_ITER {
        let assign = model.assign(x);
        let mut sums = vec![0.0; k * x.dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * x.dim..(c + 1) * x.dim].iter_mut().zip(x.row(i)) {
                *s += f64::from(v);
            }
        }
        if counts.contains(&0) {
            return None;
        }
        let mut shift = 0.0;
        for c in 0..k {
            for j in 0..x.dim {
                let v = sums[c * x.dim + j] / counts[c] as f64;
                shift += (v - model.centroids[c * x.dim + j]).powi(2);
                model.centroids[c * x.dim + j] = v;
            }
        }
        if shift <= TOL * TOL {
            break;
        }
    }
    Some(model)
}

/// K-Means with one re-seeded retry when a cluster empties.
pub fn kmeans(x: &FeatureMatrix, k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > x.rows {
        return Err(Error::Config(format!("k = {k} with {} rows", x.rows)));
    }
    lloyd(x, k, seed)
        .or_else(|| {
            log::warn!("k-means produced an empty cluster; re-seeding once");
            lloyd(x, k, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
        })
        .ok_or_else(|| Error::Numerical(format!("k-means left a cluster empty twice (k = {k})")))
}

/// Assignment `row → column` maximizing the summed entries of a square matrix.
pub fn hungarian_max(weights: &[Vec<i64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let max = weights.iter().flatten().copied().max().unwrap_or(0);
    // Minimization form with 1-based potentials.
    let cost = |i: usize, j: usize| max - weights[i - 1][j - 1];
    let inf = i64::MAX / 4;
    let (mut u, mut v) = (vec![0i64; n + 1], vec![0i64; n + 1]);
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// `counts[cluster][label]` for `k` clusters and `k` labels.
pub fn contingency(clusters: &[usize], labels: &[usize], k: usize) -> Vec<Vec<i64>> {
    let mut m = vec![vec![0i64; k]; k];
    for (&c, &l) in clusters.iter().zip(labels) {
        m[c][l] += 1;
    }
    m
}

/// Cluster → label map maximizing agreement with `labels`.
pub fn cluster_label_map(clusters: &[usize], labels: &[usize], k: usize) -> Vec<usize> {
    hungarian_max(&contingency(clusters, labels, k))
}

/// Clustering accuracy of K-Means under the optimal cluster↔label matching.
pub fn kmeans_hungarian_accuracy(
    x: &FeatureMatrix,
    labels: &[usize],
    k: usize,
    seed: u64,
) -> Result<f64> {
    if x.rows != labels.len() || x.rows == 0 {
        return Err(Error::Validation(
            "feature/label count mismatch or empty input".into(),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Validation(format!("label {bad} outside 0..{k}")));
    }
    let clusters = kmeans(x, k, seed)?.assign(x);
    let map = cluster_label_map(&clusters, labels, k);
    let hits = clusters
        .iter()
        .zip(labels)
        .filter(|(&c, &l)| map[c] == l)
        .count();
    Ok(hits as f64 / x.rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_features_cluster_perfectly() {
        let k = 4;
        let labels: Vec<usize> = (0..40).map(|i| (i * 3) % k).collect();
        let mut v = Vec::new();
        for &l in &labels {
            v.extend((0..k).map(|c| if c == l { 1.0 } else { 0.0 }));
        }
        let x = FeatureMatrix::new(40, k, v).unwrap();
        assert_eq!(kmeans_hungarian_accuracy(&x, &labels, k, 3).unwrap(), 1.0);
    }

    #[test]
    fn hungarian_known_case() {
        let w = vec![vec![1, 9, 0], vec![8, 2, 0], vec![0, 0, 7]];
        assert_eq!(hungarian_max(&w), vec![1, 0, 2]);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let x = FeatureMatrix::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(kmeans(&x, 3, 0).is_err());
    }

    #[test]
    fn duplicate_points_force_empty_cluster_error() {
        let x = FeatureMatrix::new(3, 1, vec![1.0; 3]).unwrap();
        assert!(matches!(kmeans(&x, 2, 0), Err(Error::Numerical(_))));
    }
}
