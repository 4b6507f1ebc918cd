//! End-to-end recovery: cluster the population, build per-cluster cost
//! matrices, solve an arborescence per cluster, and score the result against
//! a ground-truth manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arborescence::{best_arborescence, Arborescence};
use crate::clustering::{self, label_accuracy, ClusterAssignment, ClusterMode};
use crate::error::{Error, Result};
use crate::matrices::{self, build_distance_matrix, CostMatrices, DistanceMetric, Matrix, NodeSet};
use crate::metrics::{self, MetricConfig};
use crate::weightstore::{GraphManifest, ModelWeights, Stage, TensorRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RootPolicy {
    /// Solve for every root and keep the cheapest tree.
    #[default]
    All,
    /// Root each tree at its most extreme directional score.
    ScoreHint,
}

impl FromStr for RootPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(RootPolicy::All),
            "score-hint" => Ok(RootPolicy::ScoreHint),
            other => Err(Error::Config(format!("unknown root policy `{other}`"))),
        }
    }
}

impl fmt::Display for RootPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RootPolicy::All => "all",
            RootPolicy::ScoreHint => "score-hint",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub metric: DistanceMetric,
    pub c: f64,
    pub metric_config: MetricConfig,
    pub cluster_mode: ClusterMode,
    pub root_policy: RootPolicy,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            metric: DistanceMetric::Ft,
            c: matrices::DEFAULT_C,
            metric_config: MetricConfig::default(),
            cluster_mode: ClusterMode::Full,
            root_policy: RootPolicy::All,
        }
    }
}

/// Settings recorded with every recovered graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub metric: DistanceMetric,
    pub c: f64,
    pub epsilon_rel: f64,
    pub k: usize,
    pub root_policy: RootPolicy,
    pub cluster_mode: ClusterMode,
    pub distance_filter: String,
    pub score_filter: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredTree {
    /// Model ids; indices in `arborescence` refer to this list.
    pub nodes: Vec<String>,
    pub arborescence: Arborescence,
    pub lambda: f64,
}

impl RecoveredTree {
    pub fn root_id(&self) -> &str {
        &self.nodes[self.arborescence.root]
    }

    /// `(parent id, child id)` pairs.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.arborescence
            .edges()
            .into_iter()
            .map(|(p, c)| (self.nodes[p].as_str(), self.nodes[c].as_str()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveredGraph {
    pub trees: Vec<RecoveredTree>,
    pub provenance: Provenance,
}

impl RecoveredGraph {
    /// Predicted parent of every model.
    pub fn parent_map(&self) -> HashMap<&str, Option<&str>> {
        let mut out = HashMap::new();
        for t in &self.trees {
            for (i, id) in t.nodes.iter().enumerate() {
                let p = t.arborescence.parent[i].map(|p| t.nodes[p].as_str());
                out.insert(id.as_str(), p);
            }
        }
        out
    }

    pub fn model_ids(&self) -> Vec<&str> {
        self.trees.iter().flat_map(|t| t.nodes.iter().map(String::as_str)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Graphviz rendering with sorted node and edge lists.
    pub fn to_dot(&self) -> String {
        let mut nodes: Vec<&str> = self.model_ids();
        nodes.sort_unstable();
        let mut edges: Vec<(&str, &str)> = self.trees.iter().flat_map(|t| t.edges()).collect();
        edges.sort_unstable();
        let mut out = String::from("digraph model_graph {\n");
        for n in nodes {
            out.push_str(&format!("  {};\n", dot_id(n)));
        }
        for (p, c) in edges {
            out.push_str(&format!("  {} -> {};\n", dot_id(p), dot_id(c)));
        }
        out.push_str("}\n");
        out
    }
}

fn dot_id(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Json,
    Dot,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(GraphFormat::Json),
            "dot" => Ok(GraphFormat::Dot),
            other => Err(Error::Config(format!("unknown graph format `{other}`"))),
        }
    }
}

pub fn export_graph(g: &RecoveredGraph, format: GraphFormat, path: &Path) -> Result<()> {
    let mut text = match format {
        GraphFormat::Json => g.to_json()?,
        GraphFormat::Dot => g.to_dot(),
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything recovery needs that does not depend on `k` or `c`: ids, stages,
/// directional scores and the clustering distances. Computing it once lets
/// callers sweep those parameters without touching the weights again.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSummary {
    pub ids: Vec<String>,
    pub stages: Vec<Stage>,
    pub scores: Vec<f64>,
    pub cluster_distances: Matrix,
}

impl PopulationSummary {
    pub fn of(s: &NodeSet, cfg: &RecoveryConfig) -> Result<Self> {
        let scores = matrices::directional_scores(s)?;
        let cluster_distances = if s.len() > 1 {
            clustering::clustering_distances(s, &cfg.cluster_mode)?
        } else {
            vec![vec![f64::INFINITY]]
        };
        Ok(PopulationSummary {
            ids: s.ids(),
            stages: s.stages(),
            scores,
            cluster_distances,
        })
    }

    /// Whether per-cluster distances can be read off the clustering matrix.
    fn reuses_distances(cfg: &RecoveryConfig) -> bool {
        cfg.metric == DistanceMetric::Ft && cfg.cluster_mode == ClusterMode::Full
    }
}

fn provenance(cfg: &RecoveryConfig, k: usize) -> Provenance {
    Provenance {
        tool_version: crate::TOOL_VERSION.to_string(),
        metric: cfg.metric,
        c: cfg.c,
        epsilon_rel: cfg.metric_config.epsilon_rel,
        k,
        root_policy: cfg.root_policy,
        cluster_mode: cfg.cluster_mode.clone(),
        distance_filter: cfg.metric_config.distance_filter.as_str().to_string(),
        score_filter: cfg.metric_config.score_filter.as_str().to_string(),
    }
}

/// Larger is a better root: the score for specialization nodes, its
/// negation for generalization nodes.
fn root_preference(scores: &[f64], stages: &[Stage]) -> Vec<f64> {
    scores
        .iter()
        .zip(stages)
        .map(|(&s, st)| match st {
            Stage::Specialization => s,
            Stage::Generalization => -s,
        })
        .collect()
}

fn sub_matrix(m: &Matrix, idx: &[usize]) -> Matrix {
    idx.iter()
        .map(|&i| idx.iter().map(|&j| m[i][j]).collect())
        .collect()
}

/// Recovers one tree over the nodes `members` of the population.
fn recover_cluster(
    summary: &PopulationSummary,
    nodes: Option<&NodeSet>,
    members: &[usize],
    cfg: &RecoveryConfig,
) -> Result<RecoveredTree> {
    let ids: Vec<String> = members.iter().map(|&i| summary.ids[i].clone()).collect();
    if members.len() == 1 {
        return Ok(RecoveredTree {
            nodes: ids,
            arborescence: Arborescence {
                root: 0,
                parent: vec![None],
                total_cost: 0.0,
            },
            lambda: 0.0,
        });
    }
    let d = if PopulationSummary::reuses_distances(cfg) {
        sub_matrix(&summary.cluster_distances, members)
    } else {
        let s = nodes.ok_or_else(|| {
            Error::InvalidInput("weights are required for this metric".into())
        })?;
        build_distance_matrix(&s.subset(members))?
    };
    let scores: Vec<f64> = members.iter().map(|&i| summary.scores[i]).collect();
    let stages: Vec<Stage> = members.iter().map(|&i| summary.stages[i]).collect();
    let cm = CostMatrices::from_parts(d, scores, &stages, cfg.c)?;
    let pref = root_preference(&cm.scores, &stages);
    let hint = match cfg.root_policy {
        RootPolicy::All => None,
        RootPolicy::ScoreHint => (0..pref.len()).reduce(|a, b| if pref[b] > pref[a] { b } else { a }),
    };
    let arborescence = best_arborescence(&cm.m, hint, Some(&pref))?;
    Ok(RecoveredTree {
        nodes: ids,
        arborescence,
        lambda: cm.lambda,
    })
}

/// Recovery from a precomputed summary. `nodes` must be given when the
/// per-cluster distances cannot be taken from the clustering matrix.
pub fn recover_summarized(
    summary: &PopulationSummary,
    nodes: Option<&NodeSet>,
    k: usize,
    cfg: &RecoveryConfig,
) -> Result<RecoveredGraph> {
    let n = summary.ids.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty population".into()));
    }
    if !(cfg.c >= 0.0 && cfg.c.is_finite()) {
        return Err(Error::Config(format!("c must be finite and ≥ 0, got {}", cfg.c)));
    }
    let assignment = if n == 1 {
        if k != 1 {
            return Err(Error::InvalidInput(format!("k = {k} must lie in 1..=1")));
        }
        ClusterAssignment {
            labels: vec![0],
            k: 1,
        }
    } else {
        clustering::single_linkage(&summary.cluster_distances, k)?
    };
    let trees = assignment
        .members()
        .par_iter()
        .enumerate()
        .map(|(ci, members)| {
            recover_cluster(summary, nodes, members, cfg).map_err(|e| Error::Cluster {
                cluster: ci,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecoveredGraph {
        trees,
        provenance: provenance(cfg, k),
    })
}

/// Cluster into `k` trees, then recover each tree.
pub fn recover(s: &NodeSet, k: usize, cfg: &RecoveryConfig) -> Result<RecoveredGraph> {
    if s.metric != cfg.metric || s.metric_config != cfg.metric_config {
        return Err(Error::Config(
            "node set and recovery config disagree on the metric".into(),
        ));
    }
    let summary = PopulationSummary::of(s, cfg)?;
    recover_summarized(&summary, Some(s), k, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeErrorKind {
    /// The predicted edge joins the right pair the wrong way round.
    WrongDirection,
    WrongPlacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeError {
    pub child: String,
    pub predicted_parent: Option<String>,
    pub true_parent: String,
    pub kind: EdgeErrorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy per true tree, keyed by the true root id.
    pub per_tree_accuracy: BTreeMap<String, f64>,
    pub graph_accuracy: f64,
    pub clustering_accuracy: f64,
    pub edge_errors: Vec<EdgeError>,
    pub true_edges: usize,
    pub correct_edges: usize,
}

impl EvalReport {
    /// Plain-text summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>9}\n", "tree", "accuracy"));
        for (t, a) in &self.per_tree_accuracy {
            out.push_str(&format!("{t:<24} {a:>9.4}\n"));
        }
        out.push_str(&format!("{:<24} {:>9.4}\n", "graph", self.graph_accuracy));
        out.push_str(&format!("{:<24} {:>9.4}\n", "clustering", self.clustering_accuracy));
        out.push_str(&format!(
            "{:<24} {:>9}\n",
            "edges correct",
            format!("{}/{}", self.correct_edges, self.true_edges)
        ));
        out
    }
}

/// Scores a recovered graph: an edge is correct iff the predicted parent of
/// its child is the true parent. A tree's accuracy is its fraction of
/// correct edges (a single-node tree scores 1 iff it is predicted as a
/// root); the graph accuracy is the mean over true trees.
pub fn evaluate(pred: &RecoveredGraph, truth: &GraphManifest) -> Result<EvalReport> {
    let predicted = pred.parent_map();
    let pred_ids: HashSet<&str> = predicted.keys().copied().collect();
    let true_ids: HashSet<&str> = truth.nodes.iter().map(|n| n.model_id.as_str()).collect();
    if pred_ids != true_ids || predicted.len() != pred.model_ids().len() {
        let missing: Vec<_> = true_ids.difference(&pred_ids).take(3).collect();
        let extra: Vec<_> = pred_ids.difference(&true_ids).take(3).collect();
        return Err(Error::InvalidInput(format!(
            "id mismatch between prediction and manifest (missing {missing:?}, unexpected {extra:?})"
        )));
    }

    let mut per_tree = BTreeMap::new();
    let mut accuracies = Vec::new();
    let mut edge_errors = Vec::new();
    let (mut true_edges, mut correct_edges) = (0, 0);
    for members in truth.trees() {
        let mut edges = 0;
        let mut correct = 0;
        for id in &members {
            let Some(true_parent) = truth.parent_of(id) else {
                continue;
            };
            edges += 1;
            let got = predicted[id.as_str()];
            if got == Some(true_parent) {
                correct += 1;
            } else {
                let kind = if predicted[true_parent] == Some(id.as_str()) {
                    EdgeErrorKind::WrongDirection
                } else {
                    EdgeErrorKind::WrongPlacement
                };
                edge_errors.push(EdgeError {
                    child: id.clone(),
                    predicted_parent: got.map(str::to_string),
                    true_parent: true_parent.to_string(),
                    kind,
                });
            }
        }
        let acc = if edges == 0 {
            let root = &members[0];
            f64::from(u8::from(predicted[root.as_str()].is_none()))
        } else {
            correct as f64 / edges as f64
        };
        true_edges += edges;
        correct_edges += correct;
        let root = truth.root_of(&members[0]).unwrap_or(&members[0]).to_string();
        per_tree.insert(root, acc);
        accuracies.push(acc);
    }
    let graph_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;

    // Clustering accuracy over predicted vs true components.
    let ids: Vec<&str> = pred.model_ids();
    let pred_labels: Vec<usize> = pred
        .trees
        .iter()
        .enumerate()
        .flat_map(|(t, tree)| std::iter::repeat_n(t, tree.nodes.len()))
        .collect();
    let mut tree_index = HashMap::new();
    for (t, members) in truth.trees().iter().enumerate() {
        for id in members {
            tree_index.insert(id.clone(), t);
        }
    }
    let true_labels: Vec<usize> = ids.iter().map(|id| tree_index[*id]).collect();
    let clustering_accuracy = label_accuracy(&pred_labels, &true_labels);

    Ok(EvalReport {
        per_tree_accuracy: per_tree,
        graph_accuracy,
        clustering_accuracy,
        edge_errors,
        true_edges,
        correct_edges,
    })
}

/// Expected accuracy of attaching every non-root to a uniformly random other
/// member of its tree: the mean over trees of `1 / (n - 1)`.
pub fn random_parent_baseline(truth: &GraphManifest) -> f64 {
    let trees = truth.trees();
    let vals: Vec<f64> = trees
        .iter()
        .map(|t| if t.len() > 1 { 1.0 / (t.len() - 1) as f64 } else { 1.0 })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Entrywise mean of a group of models.
pub fn cluster_center(members: &[&ModelWeights], id: &str) -> Result<ModelWeights> {
    let first = members
        .first()
        .ok_or_else(|| Error::InvalidInput("empty cluster".into()))?;
    let n = members.len() as f64;
    let tensors = first
        .tensors()
        .iter()
        .map(|t| {
            let mut acc = vec![0.0f64; t.numel()];
            for m in members {
                let other = m.get(t.name()).ok_or_else(|| {
                    Error::InvalidInput(format!("layer `{}` missing from `{}`", t.name(), m.model_id()))
                })?;
                if other.shape() != t.shape() {
                    return Err(Error::ShapeMismatch {
                        name: t.name().to_string(),
                        left: t.shape().to_vec(),
                        right: other.shape().to_vec(),
                    });
                }
                for (a, &v) in acc.iter_mut().zip(other.data()) {
                    *a += v as f64;
                }
            }
            TensorRecord::new(
                t.name(),
                t.shape().to_vec(),
                acc.into_iter().map(|a| (a / n) as f32).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ModelWeights::new(id, tensors)
}

/// Ranks candidate parent clusters of a merged model by the cosine
/// similarity between the model and each cluster's mean weights, highest
/// first (ties by cluster id). The top two are the predicted parents.
pub fn detect_merge_parents(
    model: &ModelWeights,
    clusters: &[(usize, Vec<&ModelWeights>)],
) -> Result<Vec<(usize, f64)>> {
    if clusters.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need ≥ 2 clusters, got {}",
            clusters.len()
        )));
    }
    let mut out = clusters
        .iter()
        .map(|(cid, members)| {
            let center = cluster_center(members, &format!("center{cid}"))?;
            let sim = metrics::cosine_similarity(model, &center)
                .map_err(|e| Error::Cluster {
                    cluster: *cid,
                    source: Box::new(e),
                })?;
            Ok((*cid, sim))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(out)
}
