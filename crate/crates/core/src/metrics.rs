//! Weight-space statistics: layer distances, low-rank delta ranks and
//! directional weight scores.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, CentralMoments};
use crate::weightstore::{ModelWeights, TensorRecord};

pub const DEFAULT_EPSILON_REL: f64 = 1e-5;
/// Default layer pattern for directional scores: the dense layers.
pub const DEFAULT_SCORE_PATTERN: &str = "dense";
pub const ENTROPY_BINS: usize = 256;

/// Name predicate selecting a layer subset. No pattern selects every layer.
#[derive(Clone, Default)]
pub struct LayerFilter {
    regex: Option<Regex>,
}

impl LayerFilter {
    pub fn all() -> Self {
        LayerFilter { regex: None }
    }

    pub fn pattern(pattern: &str) -> Result<Self> {
        let regex = Regex::new(pattern)
            .map_err(|e| Error::Config(format!("bad layer pattern `{pattern}`: {e}")))?;
        Ok(LayerFilter { regex: Some(regex) })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.regex.as_ref().is_none_or(|r| r.is_match(name))
    }

    pub fn as_str(&self) -> &str {
        self.regex.as_ref().map_or("", Regex::as_str)
    }
}

impl fmt::Debug for LayerFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LayerFilter({:?})", self.as_str())
    }
}

impl PartialEq for LayerFilter {
    fn eq(&self, other: &Self) -> bool {
        self.as_str() == other.as_str()
    }
}

impl Serialize for LayerFilter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for LayerFilter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        if s.is_empty() {
            Ok(LayerFilter::all())
        } else {
            LayerFilter::pattern(&s).map_err(serde::de::Error::custom)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionalStatistic {
    #[default]
    Kurtosis,
    Variance,
    Skewness,
    Entropy,
}

impl FromStr for DirectionalStatistic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kurtosis" => Ok(Self::Kurtosis),
            "variance" => Ok(Self::Variance),
            "skewness" => Ok(Self::Skewness),
            "entropy" => Ok(Self::Entropy),
            other => Err(Error::Config(format!("unknown statistic `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Singular values at or below `epsilon_rel * sigma_max` do not count
    /// towards the rank.
    pub epsilon_rel: f64,
    /// Layers compared by the weight distances.
    pub distance_filter: LayerFilter,
    /// Layers summed by the directional score.
    pub score_filter: LayerFilter,
    pub directional_statistic: DirectionalStatistic,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            epsilon_rel: DEFAULT_EPSILON_REL,
            distance_filter: LayerFilter::all(),
            score_filter: LayerFilter::pattern(DEFAULT_SCORE_PATTERN).expect("static pattern"),
            directional_statistic: DirectionalStatistic::Kurtosis,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_rel > 0.0 && self.epsilon_rel < 1.0) {
            return Err(Error::Config(format!(
                "epsilon_rel must lie in (0, 1), got {}",
                self.epsilon_rel
            )));
        }
        Ok(())
    }
}

/// Pairs of same-named layers selected by `filter`, in `u`'s order.
/// Layers present in only one model are skipped with a warning.
pub fn common_layers<'a>(
    u: &'a ModelWeights,
    v: &'a ModelWeights,
    filter: &LayerFilter,
) -> Result<Vec<(&'a TensorRecord, &'a TensorRecord)>> {
    let mut out = Vec::new();
    let mut disjoint = 0usize;
    for a in u.tensors().iter().filter(|t| filter.matches(t.name())) {
        match v.get(a.name()) {
            Some(b) => {
                if a.shape() != b.shape() {
                    return Err(Error::ShapeMismatch {
                        name: a.name().to_string(),
                        left: a.shape().to_vec(),
                        right: b.shape().to_vec(),
                    });
                }
                out.push((a, b));
            }
            None => disjoint += 1,
        }
    }
    disjoint += v
        .tensors()
        .iter()
        .filter(|t| filter.matches(t.name()) && u.get(t.name()).is_none())
        .count();
    if disjoint > 0 {
        warn!(
            "{disjoint} layer(s) of `{}` / `{}` are not shared and were skipped",
            u.model_id(),
            v.model_id()
        );
    }
    if out.is_empty() {
        return Err(Error::NoCommonLayers(
            u.model_id().to_string(),
            v.model_id().to_string(),
        ));
    }
    Ok(out)
}

pub fn layer_l2(a: &TensorRecord, b: &TensorRecord) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            name: a.name().to_string(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(numeric::sum_sq_diff(a.data(), b.data()).sqrt())
}

/// Mean over the selected common layers of the per-layer l2 distance.
pub fn ft_distance(u: &ModelWeights, v: &ModelWeights, cfg: &MetricConfig) -> Result<f64> {
    let pairs = common_layers(u, v, &cfg.distance_filter)?;
    let per_layer = pairs
        .iter()
        .map(|(a, b)| layer_l2(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(numeric::pairwise_sum(&per_layer) / per_layer.len() as f64)
}

/// l2 norm of the difference of the flattened concatenation of common layers.
pub fn concatenated_l2(u: &ModelWeights, v: &ModelWeights, filter: &LayerFilter) -> Result<f64> {
    let pairs = common_layers(u, v, filter)?;
    let sq: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| numeric::sum_sq_diff(a.data(), b.data()))
        .collect();
    Ok(numeric::pairwise_sum(&sq).sqrt())
}

/// Number of singular values strictly above `epsilon_rel * sigma_max`.
pub fn effective_rank(m: &DMatrix<f64>, epsilon_rel: f64) -> Result<usize> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix".into()));
    }
    if m.is_empty() {
        return Ok(0);
    }
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0f64, f64::max);
    if max == 0.0 {
        return Ok(0);
    }
    let threshold = epsilon_rel * max;
    Ok(sv.iter().filter(|&&s| s > threshold).count())
}

/// Row-major `[rows, cols]` data as a matrix. The transpose is built, which
/// has the same singular values and avoids a reorder.
fn matrix_from_rows(rows: usize, cols: usize, data: impl Iterator<Item = f64>) -> DMatrix<f64> {
    DMatrix::from_iterator(cols, rows, data)
}

/// Effective rank of a tensor viewed as `[dim0, rest]`.
pub fn tensor_rank(t: &TensorRecord, epsilon_rel: f64) -> Result<usize> {
    let (rows, cols) = t.matrix_dims();
    let m = matrix_from_rows(rows, cols, t.data().iter().map(|&v| v as f64));
    effective_rank(&m, epsilon_rel).map_err(|_| Error::NonFinite(t.name().to_string()))
}

/// Effective rank of `a - b`, with the difference formed in `f64`.
pub fn delta_rank(a: &TensorRecord, b: &TensorRecord, epsilon_rel: f64) -> Result<usize> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            name: a.name().to_string(),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let (rows, cols) = a.matrix_dims();
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x as f64 - y as f64);
    let m = matrix_from_rows(rows, cols, diff);
    effective_rank(&m, epsilon_rel).map_err(|_| Error::NonFinite(a.name().to_string()))
}

/// Maximum over the selected common layers of the rank of the difference.
pub fn lora_distance(u: &ModelWeights, v: &ModelWeights, cfg: &MetricConfig) -> Result<usize> {
    let pairs = common_layers(u, v, &cfg.distance_filter)?;
    let mut best = 0;
    for (a, b) in pairs {
        // Identical layers have rank 0; skip the decomposition.
        if a.data() == b.data() {
            continue;
        }
        best = best.max(delta_rank(a, b, cfg.epsilon_rel)?);
    }
    Ok(best)
}

/// Per-layer value of a statistic, or `None` for a zero-variance layer.
pub fn layer_statistic(data: &[f32], stat: DirectionalStatistic) -> Option<f64> {
    let m = CentralMoments::of(data);
    if m.m2.is_nan() || m.m2 <= 0.0 {
        return None;
    }
    Some(match stat {
        DirectionalStatistic::Kurtosis => m.kurtosis(),
        DirectionalStatistic::Variance => m.m2,
        DirectionalStatistic::Skewness => m.skewness(),
        DirectionalStatistic::Entropy => histogram_entropy(data)?,
    })
}

/// Shannon entropy (nats) of a `ENTROPY_BINS`-bin histogram over `[min, max]`.
/// `None` when the range is empty.
pub fn histogram_entropy(data: &[f32]) -> Option<f64> {
    let (lo, hi) = data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if hi.is_nan() || hi <= lo {
        return None;
    }
    let (lo, width) = (lo as f64, hi as f64 - lo as f64);
    let mut counts = vec![0u64; ENTROPY_BINS];
    for &v in data {
        let pos = (v as f64 - lo) / width * ENTROPY_BINS as f64;
        counts[(pos as usize).min(ENTROPY_BINS - 1)] += 1;
    }
    let n = data.len() as f64;
    let terms: Vec<f64> = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .collect();
    Some(numeric::pairwise_sum(&terms))
}

/// Sum of a per-layer statistic over the selected layers. Zero-variance
/// layers are skipped with a warning; an error is returned only if every
/// selected layer is degenerate.
pub fn ablation_statistic(u: &ModelWeights, cfg: &MetricConfig) -> Result<f64> {
    let mut values = Vec::new();
    let mut selected = 0usize;
    for t in u.tensors().iter().filter(|t| cfg.score_filter.matches(t.name())) {
        selected += 1;
        match layer_statistic(t.data(), cfg.directional_statistic) {
            Some(v) => values.push(v),
            None => warn!(
                "layer `{}` of `{}` has zero variance; skipped",
                t.name(),
                u.model_id()
            ),
        }
    }
    if selected == 0 {
        return Err(Error::DegenerateLayer(format!(
            "no layer of `{}` matches `{}`",
            u.model_id(),
            cfg.score_filter.as_str()
        )));
    }
    if values.is_empty() {
        return Err(Error::DegenerateLayer(format!(
            "every selected layer of `{}` is constant",
            u.model_id()
        )));
    }
    Ok(numeric::pairwise_sum(&values))
}

/// Sum over the selected layers of the per-layer kurtosis.
pub fn directional_score(u: &ModelWeights, cfg: &MetricConfig) -> Result<f64> {
    let cfg = MetricConfig {
        directional_statistic: DirectionalStatistic::Kurtosis,
        ..cfg.clone()
    };
    ablation_statistic(u, &cfg)
}

/// Cosine of the flattened concatenation of all common layers.
pub fn cosine_similarity(u: &ModelWeights, v: &ModelWeights) -> Result<f64> {
    let pairs = common_layers(u, v, &LayerFilter::all())?;
    let mut dots = Vec::with_capacity(pairs.len());
    let mut nu = Vec::with_capacity(pairs.len());
    let mut nv = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        dots.push(numeric::dot(a.data(), b.data()));
        nu.push(numeric::sum_sq(a.data()));
        nv.push(numeric::sum_sq(b.data()));
    }
    let (nu, nv) = (numeric::pairwise_sum(&nu), numeric::pairwise_sum(&nv));
    if nu == 0.0 || nv == 0.0 {
        let id = if nu == 0.0 { u.model_id() } else { v.model_id() };
        return Err(Error::ZeroNorm(format!("`{id}` has all-zero common layers")));
    }
    let c = numeric::pairwise_sum(&dots) / (nu.sqrt() * nv.sqrt());
    Ok(c.clamp(-1.0, 1.0))
}
