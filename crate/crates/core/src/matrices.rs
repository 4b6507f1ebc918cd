//! Cost matrices over a node set: distances `D`, score directions `K`,
//! training stages `T` and the combined cost `M = D + lambda * (K xor T)`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricConfig};
use crate::weightstore::{GraphManifest, ModelWeights, Stage};

pub const DEFAULT_C: f64 = 0.3;

/// Dense row-major square matrix.
pub type Matrix = Vec<Vec<f64>>;
pub type BinaryMatrix = Vec<Vec<u8>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// Mean per-layer l2 distance.
    #[default]
    Ft,
    /// Maximum per-layer rank of the weight difference.
    Lora,
}

impl FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft" => Ok(DistanceMetric::Ft),
            "lora" => Ok(DistanceMetric::Lora),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistanceMetric::Ft => "ft",
            DistanceMetric::Lora => "lora",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ModelNode {
    pub model_id: String,
    pub stage: Stage,
    pub weights: Arc<ModelWeights>,
}

impl ModelNode {
    pub fn new(weights: impl Into<Arc<ModelWeights>>, stage: Stage) -> Self {
        let weights = weights.into();
        ModelNode {
            model_id: weights.model_id().to_string(),
            stage,
            weights,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeSet {
    nodes: Vec<ModelNode>,
    pub metric: DistanceMetric,
    pub metric_config: MetricConfig,
}

impl NodeSet {
    pub fn new(
        nodes: Vec<ModelNode>,
        metric: DistanceMetric,
        metric_config: MetricConfig,
    ) -> Result<Self> {
        metric_config.validate()?;
        let mut seen = HashSet::with_capacity(nodes.len());
        for n in &nodes {
            if !seen.insert(n.model_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate model id `{}`",
                    n.model_id
                )));
            }
        }
        Ok(NodeSet {
            nodes,
            metric,
            metric_config,
        })
    }

    /// Node set over `models`, taking each stage from the manifest.
    pub fn from_manifest(
        models: impl IntoIterator<Item = impl Into<Arc<ModelWeights>>>,
        manifest: &GraphManifest,
        metric: DistanceMetric,
        metric_config: MetricConfig,
    ) -> Result<Self> {
        let nodes = models
            .into_iter()
            .map(|m| {
                let m: Arc<ModelWeights> = m.into();
                let node = manifest.get(m.model_id()).ok_or_else(|| {
                    Error::InvalidInput(format!("model `{}` missing from manifest", m.model_id()))
                })?;
                Ok(ModelNode::new(m, node.stage))
            })
            .collect::<Result<Vec<_>>>()?;
        NodeSet::new(nodes, metric, metric_config)
    }

    pub fn nodes(&self) -> &[ModelNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.model_id.clone()).collect()
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.nodes.iter().map(|n| n.stage).collect()
    }

    /// Subset in the given index order, sharing the weights.
    pub fn subset(&self, indices: &[usize]) -> NodeSet {
        NodeSet {
            nodes: indices.iter().map(|&i| self.nodes[i].clone()).collect(),
            metric: self.metric,
            metric_config: self.metric_config.clone(),
        }
    }
}

/// Upper-triangle pairs `(i, j)`, `i < j`, in row order.
pub(crate) fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect()
}

/// Symmetric matrix with an infinite diagonal from a pairwise function. Pairs
/// are evaluated in parallel; each entry depends only on its own pair.
pub fn pairwise_matrix<F>(n: usize, ids: &[String], f: F) -> Result<Matrix>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    let pairs = upper_pairs(n);
    let values = pairs
        .par_iter()
        .map(|&(i, j)| f(i, j).map_err(|e| Error::pair(&ids[i], &ids[j], e)))
        .collect::<Result<Vec<f64>>>()?;
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for (&(i, j), v) in pairs.iter().zip(values) {
        d[i][j] = v;
        d[j][i] = v;
    }
    Ok(d)
}

pub fn build_distance_matrix(s: &NodeSet) -> Result<Matrix> {
    if s.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need ≥ 2 nodes, got {}",
            s.len()
        )));
    }
    let ids = s.ids();
    let cfg = &s.metric_config;
    let nodes = s.nodes();
    pairwise_matrix(s.len(), &ids, |i, j| {
        let (u, v) = (&nodes[i].weights, &nodes[j].weights);
        match s.metric {
            DistanceMetric::Ft => metrics::ft_distance(u, v, cfg),
            DistanceMetric::Lora => metrics::lora_distance(u, v, cfg).map(|r| r as f64),
        }
    })
}

/// Directional score of every node under the configured statistic.
pub fn directional_scores(s: &NodeSet) -> Result<Vec<f64>> {
    s.nodes()
        .par_iter()
        .map(|n| metrics::ablation_statistic(&n.weights, &s.metric_config))
        .collect()
}

/// `K_ij = 1` iff `score_i < score_j`; ties give zero both ways.
pub fn direction_matrix(scores: &[f64]) -> BinaryMatrix {
    scores
        .iter()
        .map(|&si| scores.iter().map(|&sj| u8::from(si < sj)).collect())
        .collect()
}

pub fn build_direction_matrix(s: &NodeSet) -> Result<BinaryMatrix> {
    Ok(direction_matrix(&directional_scores(s)?))
}

/// `T_ij = 1` iff the prospective child `j` is a generalization node.
pub fn stage_matrix(stages: &[Stage]) -> BinaryMatrix {
    let n = stages.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| u8::from(i != j && stages[j] == Stage::Generalization))
                .collect()
        })
        .collect()
}

pub fn build_stage_matrix(s: &NodeSet) -> BinaryMatrix {
    stage_matrix(&s.stages())
}

/// `lambda = c * mean(finite off-diagonal D)` and `M = D + lambda (K xor T)`.
pub fn combine(d: &Matrix, k: &BinaryMatrix, t: &BinaryMatrix, c: f64) -> Result<(f64, Matrix)> {
    let n = d.len();
    if k.len() != n
        || t.len() != n
        || d.iter().any(|r| r.len() != n)
        || k.iter().chain(t.iter()).any(|r| r.len() != n)
    {
        return Err(Error::InvalidInput("inconsistent matrix shapes".into()));
    }
    if !(c >= 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("c must be finite and ≥ 0, got {c}")));
    }
    let finite: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| d[i][j])
        .filter(|v| v.is_finite())
        .collect();
    if n > 1 && finite.is_empty() {
        return Err(Error::InvalidInput(
            "all off-diagonal distances are infinite".into(),
        ));
    }
    let lambda = if finite.is_empty() {
        0.0
    } else {
        c * crate::numeric::pairwise_sum(&finite) / finite.len() as f64
    };
    let m = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        f64::INFINITY
                    } else if k[i][j] ^ t[i][j] == 1 {
                        d[i][j] + lambda
                    } else {
                        d[i][j]
                    }
                })
                .collect()
        })
        .collect();
    Ok((lambda, m))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostMatrices {
    pub d: Matrix,
    pub k: BinaryMatrix,
    pub t: BinaryMatrix,
    pub lambda: f64,
    pub m: Matrix,
    pub c: f64,
    /// Directional scores behind `K`.
    pub scores: Vec<f64>,
}

impl CostMatrices {
    pub fn build(s: &NodeSet, c: f64) -> Result<Self> {
        let d = build_distance_matrix(s)?;
        let scores = directional_scores(s)?;
        Self::from_parts(d, scores, &s.stages(), c)
    }

    pub fn from_parts(d: Matrix, scores: Vec<f64>, stages: &[Stage], c: f64) -> Result<Self> {
        let k = direction_matrix(&scores);
        let t = stage_matrix(stages);
        let (lambda, m) = combine(&d, &k, &t, c)?;
        Ok(CostMatrices {
            d,
            k,
            t,
            lambda,
            m,
            c,
            scores,
        })
    }
}

/// CSV rendering of a matrix with a header row of ids; `inf` for infinities.
pub fn matrix_to_csv(ids: &[String], m: &Matrix) -> String {
    let mut out = String::from("model_id");
    for id in ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (id, row) in ids.iter().zip(m) {
        out.push_str(id);
        for v in row {
            out.push(',');
            if v.is_infinite() {
                out.push_str("inf");
            } else {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightstore::TensorRecord;

    const INF: f64 = f64::INFINITY;

    fn node(id: &str, vals: Vec<f32>, stage: Stage) -> ModelNode {
        let t = TensorRecord::new("dense", vec![vals.len()], vals).unwrap();
        ModelNode::new(ModelWeights::new(id, vec![t]).unwrap(), stage)
    }

    fn set(nodes: Vec<ModelNode>) -> NodeSet {
        NodeSet::new(nodes, DistanceMetric::Ft, MetricConfig::default()).unwrap()
    }

    #[test]
    fn identical_models_have_zero_distance() {
        let s = set(vec![
            node("a", vec![1.0, 2.0], Stage::Specialization),
            node("b", vec![1.0, 2.0], Stage::Specialization),
        ]);
        assert_eq!(build_distance_matrix(&s).unwrap(), vec![vec![INF, 0.0], vec![0.0, INF]]);
    }

    #[test]
    fn single_node_is_rejected() {
        let s = set(vec![node("a", vec![1.0, 2.0], Stage::Specialization)]);
        let err = build_distance_matrix(&s).unwrap_err();
        assert!(err.to_string().contains("need ≥ 2 nodes"), "{err}");
    }

    #[test]
    fn pair_identity_is_attached_to_errors() {
        let other = TensorRecord::new("other", vec![1], vec![1.0]).unwrap();
        let s = set(vec![
            node("a", vec![1.0, 2.0], Stage::Specialization),
            ModelNode::new(ModelWeights::new("b", vec![other]).unwrap(), Stage::Specialization),
        ]);
        let err = build_distance_matrix(&s).unwrap_err();
        assert!(matches!(err, Error::Pair { ref a, ref b, .. } if a == "a" && b == "b"));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn direction_matrix_cases() {
        assert_eq!(direction_matrix(&[5.0, 3.0]), vec![vec![0, 0], vec![1, 0]]);
        assert_eq!(direction_matrix(&[2.0, 2.0]), vec![vec![0, 0], vec![0, 0]]);
        let k = direction_matrix(&[9.0, 7.0, 4.0, 1.0]);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(k[i][j], u8::from(i > j));
            }
        }
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn stage_matrix_cases() {
        use Stage::*;
        assert!(stage_matrix(&[Specialization; 3]).iter().flatten().all(|&v| v == 0));
        let all = stage_matrix(&[Generalization; 3]);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(all[i][j], u8::from(i != j));
            }
        }
        let mixed = stage_matrix(&[Specialization, Generalization, Specialization]);
        assert_eq!(mixed, vec![vec![0, 1, 0], vec![0, 0, 0], vec![0, 1, 0]]);
    }

    #[test]
    fn combine_arithmetic() {
        let d = vec![vec![INF, 2.0], vec![2.0, INF]];
        let k = vec![vec![0, 0], vec![1, 0]];
        let t = vec![vec![0, 0], vec![0, 0]];
        let (lambda, m) = combine(&d, &k, &t, 0.3).unwrap();
        assert!((lambda - 0.6).abs() < 1e-15);
        assert_eq!(m[0][1], 2.0);
        assert!((m[1][0] - 2.6).abs() < 1e-15);
        assert_eq!(m[0][0], INF);
        let (_, m0) = combine(&d, &k, &t, 0.0).unwrap();
        assert_eq!(m0, d);
    }

    #[test]
    fn flipping_t_moves_the_penalty() {
        let d = vec![vec![INF, 1.0], vec![1.0, INF]];
        let k = direction_matrix(&[5.0, 3.0]);
        let t0 = stage_matrix(&[Stage::Specialization; 2]);
        let t1 = stage_matrix(&[Stage::Generalization; 2]);
        let (_, m0) = combine(&d, &k, &t0, 0.3).unwrap();
        let (_, m1) = combine(&d, &k, &t1, 0.3).unwrap();
        assert!(m0[0][1] < m0[1][0]);
        assert!(m1[0][1] > m1[1][0]);
    }

    #[test]
    fn all_infinite_is_rejected() {
        let d = vec![vec![INF, INF], vec![INF, INF]];
        let z = vec![vec![0, 0], vec![0, 0]];
        assert!(combine(&d, &z, &z, 0.3).is_err());
    }

    #[test]
    fn csv_rendering() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let csv = matrix_to_csv(&ids, &vec![vec![INF, 0.0], vec![0.0, INF]]);
        assert_eq!(csv, "model_id,a,b\na,inf,0\nb,0,inf\n");
    }
}
