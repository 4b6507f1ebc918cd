//! Partitioning a population into trees by single-linkage clustering.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrices::{pairwise_matrix, Matrix, NodeSet};
use crate::metrics;
use crate::weightstore::GraphManifest;

/// Distance used for clustering.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", content = "layer", rename_all = "snake_case")]
pub enum ClusterMode {
    /// Mean per-layer l2 distance over the configured distance layers.
    #[default]
    Full,
    /// l2 distance of one named layer only.
    SingleLayer(String),
    /// l2 norm of the difference of all distance layers concatenated.
    Concatenated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Cluster id per node, numbered in order of first appearance.
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    /// Node indices of every cluster, in node order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Pairwise clustering distances for `mode`.
pub fn clustering_distances(s: &NodeSet, mode: &ClusterMode) -> Result<Matrix> {
    let nodes = s.nodes();
    let cfg = &s.metric_config;
    pairwise_matrix(s.len(), &s.ids(), |i, j| {
        let (u, v) = (&nodes[i].weights, &nodes[j].weights);
        match mode {
            ClusterMode::Full => metrics::ft_distance(u, v, cfg),
            ClusterMode::Concatenated => metrics::concatenated_l2(u, v, &cfg.distance_filter),
            ClusterMode::SingleLayer(name) => match (u.get(name), v.get(name)) {
                (Some(a), Some(b)) => metrics::layer_l2(a, b),
                _ => Err(Error::NoCommonLayers(
                    u.model_id().to_string(),
                    v.model_id().to_string(),
                )),
            },
        }
    })
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }
}

/// Merge heights of single linkage: the minimum-spanning-forest edges in the
/// order Kruskal accepts them. Pairs are sorted by `(distance, i, j)`.
pub fn single_linkage_merges(d: &Matrix) -> Vec<(usize, usize, f64)> {
    let n = d.len();
    let mut edges: Vec<(f64, usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| (d[i][j], i, j))
        .collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut ds = DisjointSet::new(n);
    let mut out = Vec::with_capacity(n.saturating_sub(1));
    for (w, i, j) in edges {
        if ds.union(i, j) {
            out.push((i, j, w));
            if out.len() + 1 == n {
                break;
            }
        }
    }
    out
}

/// Single-linkage clustering of a distance matrix cut to exactly `k` clusters.
pub fn single_linkage(d: &Matrix, k: usize) -> Result<ClusterAssignment> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!("k = {k} must lie in 1..={n}")));
    }
    let merges = single_linkage_merges(d);
    if merges.len() + 1 < n && n - merges.len() > k {
        return Err(Error::InvalidInput(format!(
            "only {} finite merges; cannot reach {k} clusters",
            merges.len()
        )));
    }
    let mut ds = DisjointSet::new(n);
    for &(i, j, _) in merges.iter().take(n - k) {
        ds.union(i, j);
    }
    let mut ids = HashMap::new();
    let labels = (0..n)
        .map(|i| {
            let r = ds.find(i);
            let next = ids.len();
            *ids.entry(r).or_insert(next)
        })
        .collect();
    Ok(ClusterAssignment { labels, k })
}

pub fn cluster_models(s: &NodeSet, k: usize, mode: &ClusterMode) -> Result<ClusterAssignment> {
    if k == 0 || k > s.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} must lie in 1..={}",
            s.len()
        )));
    }
    if s.len() == 1 {
        return Ok(ClusterAssignment {
            labels: vec![0],
            k: 1,
        });
    }
    single_linkage(&clustering_distances(s, mode)?, k)
}

/// Cluster count at the largest relative jump between consecutive merge
/// heights. A heuristic for when the number of trees is unknown.
pub fn suggest_k(d: &Matrix) -> usize {
    let n = d.len();
    let h: Vec<f64> = single_linkage_merges(d).iter().map(|m| m.2).collect();
    if h.len() < 2 {
        return 1;
    }
    let mut best = (f64::NEG_INFINITY, 1);
    for m in 1..h.len() {
        let gap = (h[m] - h[m - 1]) / h[m - 1].max(f64::MIN_POSITIVE);
        if gap > best.0 {
            best = (gap, n - m);
        }
    }
    best.1
}

/// Minimum-cost perfect assignment on a square matrix; returns the column
/// assigned to every row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // Potentials and matching over 1-based indices, column 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Fraction of nodes agreeing under the best one-to-one matching of
/// predicted to true labels.
pub fn label_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(pred.len(), truth.len(), "label vectors differ in length");
    if pred.is_empty() {
        return 1.0;
    }
    let kp = pred.iter().max().map_or(0, |m| m + 1);
    let kt = truth.iter().max().map_or(0, |m| m + 1);
    let size = kp.max(kt);
    let mut counts = vec![vec![0.0; size]; size];
    for (&p, &t) in pred.iter().zip(truth) {
        counts[p][t] += 1.0;
    }
    let cost: Vec<Vec<f64>> = counts
        .iter()
        .map(|r| r.iter().map(|&c| -c).collect())
        .collect();
    let assign = hungarian(&cost);
    let matched: f64 = assign.iter().enumerate().map(|(p, &t)| counts[p][t]).sum();
    matched / pred.len() as f64
}

/// Accuracy of `pred` (aligned with `ids`) against the manifest's trees.
pub fn clustering_accuracy(
    pred: &ClusterAssignment,
    ids: &[String],
    truth: &GraphManifest,
) -> Result<f64> {
    if pred.labels.len() != ids.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} ids",
            pred.labels.len(),
            ids.len()
        )));
    }
    let trees = truth.trees();
    let mut tree_of = HashMap::new();
    for (t, members) in trees.iter().enumerate() {
        for id in members {
            tree_of.insert(id.as_str(), t);
        }
    }
    if tree_of.len() != ids.len() {
        return Err(Error::InvalidInput(format!(
            "node-set mismatch: {} predicted vs {} in manifest",
            ids.len(),
            tree_of.len()
        )));
    }
    let truth_labels = ids
        .iter()
        .map(|id| {
            tree_of.get(id.as_str()).copied().ok_or_else(|| {
                Error::InvalidInput(format!("node-set mismatch: `{id}` not in manifest"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(label_accuracy(&pred.labels, &truth_labels))
}
