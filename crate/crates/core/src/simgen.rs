//! Synthetic model populations with known heritage.
//!
//! Roots are i.i.d. Gaussian initialisations. Children are derived from their
//! parent by one of the fine-tuning kinds below, and the directional score is
//! forced to move in the direction of the training stage by rejection
//! sampling:
//!
//! * specialization (full): entries above the tail percentile of `|w|` are
//!   pulled towards it by `tail_shrink`, then Gaussian noise is added;
//! * generalization (full): sparse Gaussian spikes;
//! * LoRA: a rank-`r` update on the adapted layers. The update's factors are
//!   partly shared between siblings (through the parent's factor stream), and
//!   a rank-preserving step along the projected score gradient moves the
//!   score in the stage direction.
//!
//! All magnitudes are relative to each layer's nominal initialisation
//! standard deviation. Every node draws from its own RNG stream derived from
//! `(seed, node path)`, so the population does not depend on thread count.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, DirectionalStatistic, LayerFilter, MetricConfig};
use crate::numeric::CentralMoments;
use crate::weightstore::{
    self, FineTuneKind, GraphManifest, ManifestNode, ModelWeights, Stage, TensorRecord,
};

/// Mean squared excess of a standard normal's `|z|` over its 95th percentile,
/// restricted to the tail: `E[(|z| - q)^2; |z| > q]` with `q = 1.959964`.
const GAUSSIAN_TAIL_MSE: f64 = 0.012973;
/// Safety factor on the root-separation guarantee for finite layers.
const SEPARATION_SLACK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Dense,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: LayerRole,
    /// Nominal initialisation standard deviation.
    pub init_std: f64,
}

impl LayerSpec {
    fn new(name: String, shape: Vec<usize>, role: LayerRole) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        LayerSpec {
            name,
            shape,
            role,
            init_std: 1.0 / (fan_in as f64).sqrt(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    fn matrix_dims(&self) -> (usize, usize) {
        (self.shape[0], self.numel() / self.shape[0])
    }
}

/// Transformer-like layout: a patch embedding, `blocks` encoder blocks with
/// query/key/value/output projections and a two-layer MLP, and a classifier.
pub fn vit_architecture(d_model: usize, blocks: usize, mlp_ratio: usize) -> Vec<LayerSpec> {
    let d = d_model;
    let h = d * mlp_ratio;
    let mut out = vec![LayerSpec::new(
        "embeddings.patch.weight".into(),
        vec![d, 3, 4, 4],
        LayerRole::Other,
    )];
    for b in 0..blocks {
        let p = format!("blocks.{b}.");
        for (suffix, shape, role) in [
            ("attention.query.weight", vec![d, d], LayerRole::Other),
            ("attention.key.weight", vec![d, d], LayerRole::Other),
            ("attention.value.weight", vec![d, d], LayerRole::Other),
            ("attention.output.dense.weight", vec![d, d], LayerRole::Dense),
            ("intermediate.dense.weight", vec![h, d], LayerRole::Dense),
            ("output.dense.weight", vec![d, h], LayerRole::Dense),
        ] {
            out.push(LayerSpec::new(format!("{p}{suffix}"), shape, role));
        }
    }
    out.push(LayerSpec::new(
        "classifier.weight".into(),
        vec![10, d],
        LayerRole::Other,
    ));
    out
}

/// The ~1M-parameter default layout.
pub fn default_architecture() -> Vec<LayerSpec> {
    vit_architecture(128, 5, 4)
}

/// Query and value projections, the usual LoRA targets.
pub fn default_lora_layers(arch: &[LayerSpec]) -> Vec<String> {
    arch.iter()
        .filter(|l| l.name.ends_with("attention.query.weight") || l.name.ends_with("attention.value.weight"))
        .map(|l| l.name.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTunePolicy {
    /// Every child is fully fine-tuned.
    Full,
    /// Every child is a LoRA update with a rank drawn from `lora_ranks`.
    Lora,
    /// Per-child coin flip between full and LoRA.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub architecture: Vec<LayerSpec>,
    pub n_trees: usize,
    /// Hierarchy levels including the root.
    pub levels: usize,
    pub branching: usize,
    pub stage: Stage,
    pub fine_tune: FineTunePolicy,
    /// Noise standard deviation, as a fraction of the layer std.
    pub ft_noise_scale: f64,
    /// Fraction of the excess over the tail percentile that is removed.
    pub tail_shrink: f64,
    pub tail_percentile: f64,
    pub spike_prob: f64,
    pub spike_scale: f64,
    pub lora_layers: Vec<String>,
    pub lora_ranks: Vec<usize>,
    /// Range of the per-child LoRA update size, as a fraction of layer std.
    pub lora_scale: [f64; 2],
    /// Cosine between a child's LoRA factors and its parent's shared factors.
    pub lora_alignment: f64,
    /// Size of the rank-preserving score step, as a fraction of layer std.
    pub lora_score_step: f64,
    /// Required ratio of inter-root distance to the expected parent-child step.
    pub inter_root_separation: f64,
    pub retry_budget: usize,
    /// Layers scored by the directional statistic (empty: all).
    pub score_pattern: String,
    /// Layers compared by weight distances (empty: all).
    pub distance_pattern: String,
}

impl Default for SimConfig {
    fn default() -> Self {
        let architecture = default_architecture();
        let lora_layers = default_lora_layers(&architecture);
        SimConfig {
            seed: 0,
            architecture,
            n_trees: 5,
            levels: 3,
            branching: 4,
            stage: Stage::Specialization,
            fine_tune: FineTunePolicy::Full,
            ft_noise_scale: 0.1,
            tail_shrink: 0.5,
            tail_percentile: 95.0,
            spike_prob: 0.01,
            spike_scale: 3.0,
            lora_layers,
            lora_ranks: vec![16],
            lora_scale: [0.05, 0.2],
            lora_alignment: 0.9,
            lora_score_step: 0.03,
            inter_root_separation: 10.0,
            retry_budget: 16,
            score_pattern: metrics::DEFAULT_SCORE_PATTERN.into(),
            distance_pattern: String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Ft,
    LoraF,
    LoraV,
    Mixed,
    Deep,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Ft,
        Preset::LoraF,
        Preset::LoraV,
        Preset::Mixed,
        Preset::Deep,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Ft => "ft",
            Preset::LoraF => "lora-f",
            Preset::LoraV => "lora-v",
            Preset::Mixed => "mixed",
            Preset::Deep => "deep",
        }
    }

    pub fn config(self, seed: u64) -> SimConfig {
        let base = SimConfig {
            seed,
            ..SimConfig::default()
        };
        let lora_pattern = r"attention\.(query|value)".to_string();
        match self {
            Preset::Ft => base,
            Preset::Deep => SimConfig {
                n_trees: 1,
                levels: 5,
                branching: 3,
                ..base
            },
            Preset::LoraF => SimConfig {
                fine_tune: FineTunePolicy::Lora,
                lora_ranks: vec![16],
                score_pattern: lora_pattern.clone(),
                distance_pattern: lora_pattern,
                ..base
            },
            Preset::LoraV => SimConfig {
                fine_tune: FineTunePolicy::Lora,
                lora_ranks: vec![8, 16, 32, 64],
                score_pattern: lora_pattern.clone(),
                distance_pattern: lora_pattern,
                ..base
            },
            Preset::Mixed => SimConfig {
                fine_tune: FineTunePolicy::Mixed,
                lora_ranks: vec![16],
                score_pattern: format!("dense|{lora_pattern}"),
                ..base
            },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset `{s}` (expected one of ft, lora-f, lora-v, mixed, deep)"
                ))
            })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn filter_from(pattern: &str) -> Result<LayerFilter> {
    if pattern.is_empty() {
        Ok(LayerFilter::all())
    } else {
        LayerFilter::pattern(pattern)
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.architecture.is_empty() {
            return bad("empty architecture".into());
        }
        let mut names = HashSet::new();
        for l in &self.architecture {
            if !names.insert(l.name.as_str()) {
                return bad(format!("duplicate layer `{}`", l.name));
            }
            if l.shape.is_empty() || l.shape.contains(&0) {
                return bad(format!("layer `{}` has degenerate shape {:?}", l.name, l.shape));
            }
            if !(l.init_std > 0.0 && l.init_std.is_finite()) {
                return bad(format!("layer `{}` needs a positive init_std", l.name));
            }
        }
        if self.n_trees == 0 || self.levels == 0 || self.branching == 0 {
            return bad("n_trees, levels and branching must be ≥ 1".into());
        }
        if !(self.spike_prob > 0.0 && self.spike_prob < 1.0) {
            return bad(format!("spike_prob must lie in (0, 1), got {}", self.spike_prob));
        }
        if !(0.0..1.0).contains(&self.tail_shrink) {
            return bad(format!("tail_shrink must lie in [0, 1), got {}", self.tail_shrink));
        }
        if !(self.tail_percentile > 0.0 && self.tail_percentile < 100.0) {
            return bad("tail_percentile must lie in (0, 100)".into());
        }
        if self.ft_noise_scale < 0.0 || self.spike_scale < 0.0 || self.lora_score_step < 0.0 {
            return bad("scales must be non-negative".into());
        }
        if !(self.lora_scale[0] >= 0.0 && self.lora_scale[0] <= self.lora_scale[1]) {
            return bad(format!("bad lora_scale range {:?}", self.lora_scale));
        }
        if !(0.0..=1.0).contains(&self.lora_alignment) {
            return bad("lora_alignment must lie in [0, 1]".into());
        }
        if self.inter_root_separation.is_nan() || self.inter_root_separation < 0.0 {
            return bad("inter_root_separation must be non-negative".into());
        }
        if self.fine_tune != FineTunePolicy::Full {
            if self.lora_ranks.is_empty() || self.lora_layers.is_empty() {
                return bad("LoRA fine-tuning needs lora_ranks and lora_layers".into());
            }
            for name in &self.lora_layers {
                let Some(l) = self.layer(name) else {
                    return bad(format!("unknown LoRA layer `{name}`"));
                };
                let (rows, cols) = l.matrix_dims();
                for &r in &self.lora_ranks {
                    if r == 0 || r > rows.min(cols) {
                        return bad(format!(
                            "rank {r} too large for layer `{name}` ({rows}×{cols})"
                        ));
                    }
                }
            }
        }
        let score_filter = filter_from(&self.score_pattern)?;
        filter_from(&self.distance_pattern)?;
        if self.fine_tune != FineTunePolicy::Full
            && !self.lora_layers.iter().any(|l| score_filter.matches(l))
        {
            return bad("the score filter matches no LoRA layer, so LoRA children cannot move the score".into());
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.architecture.iter().find(|l| l.name == name)
    }

    /// Metric settings matching this population's layer roles.
    pub fn metric_config(&self) -> Result<MetricConfig> {
        Ok(MetricConfig {
            score_filter: filter_from(&self.score_pattern)?,
            distance_filter: filter_from(&self.distance_pattern)?,
            ..MetricConfig::default()
        })
    }

    fn score_config(&self) -> Result<MetricConfig> {
        Ok(MetricConfig {
            directional_statistic: DirectionalStatistic::Kurtosis,
            ..self.metric_config()?
        })
    }

    /// Expected per-entry RMS of one fine-tuning step, in layer-std units,
    /// for the largest step the config can produce.
    pub fn expected_step(&self) -> f64 {
        let full = match self.stage {
            Stage::Specialization => (self.ft_noise_scale.powi(2)
                + self.tail_shrink.powi(2) * GAUSSIAN_TAIL_MSE)
                .sqrt(),
            Stage::Generalization => self.spike_prob.sqrt() * self.spike_scale,
        };
        let lora = (self.lora_scale[1].powi(2) + self.lora_score_step.powi(2)).sqrt();
        match self.fine_tune {
            FineTunePolicy::Full => full,
            FineTunePolicy::Lora => lora,
            FineTunePolicy::Mixed => full.max(lora),
        }
    }

    /// Root standard deviation multiplier: two independent roots are
    /// `sqrt(2) * root_scale` layer-stds apart per entry, which must exceed
    /// `inter_root_separation` expected steps.
    pub fn root_scale(&self) -> f64 {
        let needed = self.inter_root_separation * self.expected_step()
            / (std::f64::consts::SQRT_2 * SEPARATION_SLACK);
        needed.max(1.0)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// RNG stream for a node path (`"t0"`, `"t0.1"`, ...) or a derived stream.
pub fn node_rng(seed: u64, path: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(path)))
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_root(cfg: &SimConfig, tree_index: usize) -> Result<ModelWeights> {
    cfg.validate()?;
    let id = format!("t{tree_index}");
    root_with_id(cfg, &id)
}

fn root_with_id(cfg: &SimConfig, id: &str) -> Result<ModelWeights> {
    let mut rng = node_rng(cfg.seed, id);
    let scale = cfg.root_scale();
    let tensors = cfg
        .architecture
        .iter()
        .map(|l| {
            let std = l.init_std * scale;
            let data = (0..l.numel()).map(|_| (normal(&mut rng) * std) as f32).collect();
            TensorRecord::new(l.name.clone(), l.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelWeights::new(id, tensors)
}

fn init_std(cfg: &SimConfig, t: &TensorRecord) -> Result<f64> {
    cfg.layer(t.name())
        .map(|l| l.init_std)
        .ok_or_else(|| Error::Config(format!("layer `{}` is not in the architecture", t.name())))
}

/// Draws candidates until the directional score moves strictly in the
/// direction of `stage`.
fn with_score_direction<F>(
    parent: &ModelWeights,
    cfg: &SimConfig,
    stage: Stage,
    what: &str,
    mut draw: F,
) -> Result<ModelWeights>
where
    F: FnMut() -> Result<ModelWeights>,
{
    let score_cfg = cfg.score_config()?;
    let before = metrics::directional_score(parent, &score_cfg)?;
    for _ in 0..cfg.retry_budget.max(1) {
        let child = draw()?;
        let after = metrics::directional_score(&child, &score_cfg)?;
        let ok = match stage {
            Stage::Specialization => after < before,
            Stage::Generalization => after > before,
        };
        if ok {
            return Ok(child);
        }
    }
    Err(Error::RetryExhausted(format!(
        "{what} of `{}`: score did not move in {} attempts",
        parent.model_id(),
        cfg.retry_budget.max(1)
    )))
}

/// Value at the given percentile of `|x|` (nearest rank).
fn abs_percentile(x: &[f32], pct: f64) -> f32 {
    let mut a: Vec<f32> = x.iter().map(|v| v.abs()).collect();
    let rank = ((pct / 100.0) * a.len() as f64).ceil() as usize;
    let idx = rank.clamp(1, a.len()) - 1;
    *a.select_nth_unstable_by(idx, f32::total_cmp).1
}

fn shrink_and_noise(
    parent: &ModelWeights,
    cfg: &SimConfig,
    child_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<ModelWeights> {
    parent.map_tensors(child_id, |t| {
        let std = init_std(cfg, t)?;
        let q = abs_percentile(t.data(), cfg.tail_percentile) as f64;
        let keep = 1.0 - cfg.tail_shrink;
        Ok(t.data()
            .iter()
            .map(|&w| {
                let w = w as f64;
                let a = w.abs();
                let shrunk = if a > q { w.signum() * (q + keep * (a - q)) } else { w };
                let noise = if cfg.ft_noise_scale > 0.0 {
                    normal(rng) * cfg.ft_noise_scale * std
                } else {
                    0.0
                };
                (shrunk + noise) as f32
            })
            .collect())
    })
}

/// Full fine-tuning child whose directional score is strictly lower.
pub fn specialize_child(
    parent: &ModelWeights,
    cfg: &SimConfig,
    child_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<ModelWeights> {
    with_score_direction(parent, cfg, Stage::Specialization, "specialization", || {
        shrink_and_noise(parent, cfg, child_id, rng)
    })
}

/// Full fine-tuning child whose directional score is strictly higher.
pub fn generalize_child(
    parent: &ModelWeights,
    cfg: &SimConfig,
    child_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<ModelWeights> {
    with_score_direction(parent, cfg, Stage::Generalization, "generalization", || {
        parent.map_tensors(child_id, |t| {
            let std = init_std(cfg, t)?;
            Ok(t.data()
                .iter()
                .map(|&w| {
                    if rng.random_bool(cfg.spike_prob) {
                        (w as f64 + normal(rng) * cfg.spike_scale * std) as f32
                    } else {
                        w
                    }
                })
                .collect())
        })
    })
}

/// Gradient of a layer's kurtosis with respect to its entries, up to a
/// positive factor.
fn kurtosis_gradient(x: &[f32]) -> Vec<f64> {
    let m = CentralMoments::of(x);
    let k = m.kurtosis();
    x.iter()
        .map(|&v| {
            let d = v as f64 - m.mean;
            (d * d * d - m.m3) / (m.m2 * m.m2) - k * d / m.m2
        })
        .collect()
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// LoRA child of the given rank. Only `cfg.lora_layers` change, each by a
/// rank-`rank` matrix.
pub fn lora_child(
    parent: &ModelWeights,
    cfg: &SimConfig,
    rank: usize,
    parent_path: &str,
    child_id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<ModelWeights> {
    let max_rank = cfg.lora_ranks.iter().copied().max().unwrap_or(rank).max(rank);
    for name in &cfg.lora_layers {
        let t = parent
            .get(name)
            .ok_or_else(|| Error::Config(format!("LoRA layer `{name}` missing from parent")))?;
        let (rows, cols) = t.matrix_dims();
        if rank == 0 || max_rank > rows.min(cols) {
            return Err(Error::Config(format!(
                "rank {rank} too large for layer `{name}` ({rows}×{cols})"
            )));
        }
    }
    let stage = cfg.stage;
    let sign = match stage {
        Stage::Specialization => -1.0,
        Stage::Generalization => 1.0,
    };
    let (c, s) = (cfg.lora_alignment, (1.0 - cfg.lora_alignment.powi(2)).sqrt());
    let lora: HashSet<&str> = cfg.lora_layers.iter().map(String::as_str).collect();
    with_score_direction(parent, cfg, stage, "LoRA update", || {
        let a_scale = if cfg.lora_scale[1] > cfg.lora_scale[0] {
            rng.random_range(cfg.lora_scale[0]..cfg.lora_scale[1])
        } else {
            cfg.lora_scale[0]
        };
        parent.map_tensors(child_id, |t| {
            if !lora.contains(t.name()) {
                return Ok(t.data().to_vec());
            }
            let std = init_std(cfg, t)?;
            let (rows, cols) = t.matrix_dims();
            // Factors shared by all children of this parent.
            let mut shared = node_rng(cfg.seed, &format!("{parent_path}/lora/{}", t.name()));
            let a_p = gaussian_matrix(rows, max_rank, &mut shared);
            let b_p = gaussian_matrix(cols, max_rank, &mut shared);
            let a = a_p.columns(0, rank) * c + gaussian_matrix(rows, rank, rng) * s;
            let b = b_p.columns(0, rank) * c + gaussian_matrix(cols, rank, rng) * s;
            let mut delta = (&a * b.transpose()) * (a_scale * std / (rank as f64).sqrt());
            // Score step restricted to the column space of `a`.
            let g = DMatrix::from_row_slice(rows, cols, &kurtosis_gradient(t.data()));
            let q = a.clone().qr().q();
            let p = &q * (q.transpose() * g);
            let norm = p.norm();
            if norm > 0.0 {
                let size = cfg.lora_score_step * std * ((rows * cols) as f64).sqrt();
                delta += p * (sign * size / norm);
            }
            Ok(t.data()
                .iter()
                .enumerate()
                .map(|(idx, &w)| (w as f64 + delta[(idx / cols, idx % cols)]) as f32)
                .collect())
        })
    })
}

/// One generated node before the weights are attached to the manifest.
struct Generated {
    weights: ModelWeights,
    parent: Option<String>,
    kind: FineTuneKind,
    tree: String,
}

fn make_child(
    cfg: &SimConfig,
    parent: &ModelWeights,
    parent_path: &str,
    child_id: &str,
) -> Result<(ModelWeights, FineTuneKind)> {
    let mut rng = node_rng(cfg.seed, child_id);
    let use_lora = match cfg.fine_tune {
        FineTunePolicy::Full => false,
        FineTunePolicy::Lora => true,
        FineTunePolicy::Mixed => rng.random_bool(0.5),
    };
    if use_lora {
        let rank = cfg.lora_ranks[rng.random_range(0..cfg.lora_ranks.len())];
        let w = lora_child(parent, cfg, rank, parent_path, child_id, &mut rng)?;
        Ok((w, FineTuneKind::Lora { rank }))
    } else {
        let w = match cfg.stage {
            Stage::Specialization => specialize_child(parent, cfg, child_id, &mut rng)?,
            Stage::Generalization => generalize_child(parent, cfg, child_id, &mut rng)?,
        };
        Ok((w, FineTuneKind::Full))
    }
}

/// Grows a tree of `levels` levels with `branching` children per node below
/// an existing root. Children of one level are generated in parallel.
fn grow_tree(cfg: &SimConfig, root: ModelWeights, levels: usize, branching: usize) -> Result<Vec<Generated>> {
    let tree = root.model_id().to_string();
    let mut out = vec![Generated {
        weights: root,
        parent: None,
        kind: FineTuneKind::Full,
        tree: tree.clone(),
    }];
    let mut frontier = vec![0usize];
    for _ in 1..levels {
        let jobs: Vec<(usize, usize)> = frontier
            .iter()
            .flat_map(|&p| (0..branching).map(move |b| (p, b)))
            .collect();
        let children = jobs
            .par_iter()
            .map(|&(p, b)| {
                let parent = &out[p].weights;
                let id = format!("{}.{b}", parent.model_id());
                make_child(cfg, parent, parent.model_id(), &id)
            })
            .collect::<Result<Vec<_>>>()?;
        frontier.clear();
        for (&(p, _), (weights, kind)) in jobs.iter().zip(children) {
            frontier.push(out.len());
            out.push(Generated {
                parent: Some(out[p].weights.model_id().to_string()),
                weights,
                kind,
                tree: tree.clone(),
            });
        }
    }
    Ok(out)
}

fn assemble(cfg: &SimConfig, nodes: Vec<Generated>) -> Result<(Vec<ModelWeights>, GraphManifest)> {
    let mut models = Vec::with_capacity(nodes.len());
    let mut manifest = Vec::with_capacity(nodes.len());
    for g in nodes {
        manifest.push(ManifestNode {
            model_id: g.weights.model_id().to_string(),
            parent_id: g.parent,
            stage: cfg.stage,
            kind: g.kind,
            tree: Some(g.tree),
        });
        models.push(g.weights);
    }
    Ok((models, GraphManifest::new(manifest)?))
}

/// Trees with the given `(levels, branching)` shapes, roots `t0`, `t1`, ...
pub fn generate_trees(
    cfg: &SimConfig,
    shapes: &[(usize, usize)],
) -> Result<(Vec<ModelWeights>, GraphManifest)> {
    cfg.validate()?;
    let mut nodes = Vec::new();
    for (i, &(levels, branching)) in shapes.iter().enumerate() {
        if levels == 0 || (levels > 1 && branching == 0) {
            return Err(Error::Config(format!("bad tree shape ({levels}, {branching})")));
        }
        let root = generate_root(cfg, i)?;
        nodes.extend(grow_tree(cfg, root, levels, branching)?);
    }
    assemble(cfg, nodes)
}

/// `n_trees` trees of `levels` levels with `branching` children per node.
pub fn generate_graph(cfg: &SimConfig) -> Result<(Vec<ModelWeights>, GraphManifest)> {
    generate_trees(cfg, &vec![(cfg.levels, cfg.branching); cfg.n_trees])
}

/// The three-node configurations used as recovery warm-ups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmupCase {
    /// Grandparent → parent → child.
    Gpc,
    /// A parent with two children.
    Pc2,
    /// Parent → child, plus an unrelated stranger.
    Pcs,
    /// Three unrelated models.
    S3,
}

impl WarmupCase {
    pub fn shapes(self) -> Vec<(usize, usize)> {
        match self {
            WarmupCase::Gpc => vec![(3, 1)],
            WarmupCase::Pc2 => vec![(2, 2)],
            WarmupCase::Pcs => vec![(2, 1), (1, 1)],
            WarmupCase::S3 => vec![(1, 1); 3],
        }
    }

    pub fn n_trees(self) -> usize {
        self.shapes().len()
    }
}

pub fn generate_warmup(cfg: &SimConfig, case: WarmupCase) -> Result<(Vec<ModelWeights>, GraphManifest)> {
    generate_trees(cfg, &case.shapes())
}

/// Population for parent detection of merged models: `n_roots` unrelated
/// roots, one uniform merge per pair of roots, and `branching` specialized
/// children of every root and merge. Merges are ids `m{a}+{b}` with no
/// single parent.
pub fn generate_merge_population(
    cfg: &SimConfig,
    n_roots: usize,
) -> Result<(Vec<ModelWeights>, GraphManifest)> {
    cfg.validate()?;
    let mut nodes = Vec::new();
    let roots = (0..n_roots)
        .map(|i| generate_root(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let mut bases: Vec<(ModelWeights, FineTuneKind)> = roots
        .iter()
        .map(|r| (r.clone(), FineTuneKind::Full))
        .collect();
    for a in 0..n_roots {
        for b in a + 1..n_roots {
            let id = format!("m{a}+{b}");
            let merged = merge_models(&roots[a], &roots[b], &id)?;
            let kind = FineTuneKind::Merge {
                parents: vec![roots[a].model_id().into(), roots[b].model_id().into()],
            };
            bases.push((merged, kind));
        }
    }
    for (base, kind) in bases {
        let mut tree = grow_tree(cfg, base, 2, cfg.branching)?;
        tree[0].kind = kind;
        nodes.extend(tree);
    }
    let (models, mut manifest) = assemble(cfg, nodes)?;
    for n in &mut manifest.nodes {
        if matches!(n.kind, FineTuneKind::Merge { .. }) || n.parent_id.is_none() {
            n.tree = None;
        } else {
            n.tree = n.parent_id.clone();
        }
    }
    manifest.validate()?;
    Ok((models, manifest))
}

/// Zeroes the `floor(fraction * n)` smallest-magnitude entries of every
/// tensor; ties go to the lower index.
pub fn prune_model(m: &ModelWeights, fraction: f64) -> Result<ModelWeights> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!(
            "pruning fraction must lie in [0, 1), got {fraction}"
        )));
    }
    m.map_tensors(m.model_id(), |t| {
        let n = t.numel();
        let count = (fraction * n as f64).floor() as usize;
        let mut data = t.data().to_vec();
        if count == 0 {
            return Ok(data);
        }
        let mut order: Vec<usize> = (0..n).collect();
        let key = |i: &usize| (data[*i].abs(), *i);
        order.select_nth_unstable_by(count - 1, |a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
        });
        for &i in &order[..count] {
            data[i] = 0.0;
        }
        Ok(data)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    F16,
    Int8,
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f16" => Ok(QuantMode::F16),
            "int8" => Ok(QuantMode::Int8),
            other => Err(Error::Config(format!("unknown quantization `{other}`"))),
        }
    }
}

/// Quantize-dequantize round trip: IEEE half precision, or per-tensor
/// symmetric int8 with `scale = max|w| / 127`.
pub fn quantize_model(m: &ModelWeights, mode: QuantMode) -> Result<ModelWeights> {
    if m.tensors().iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite(m.model_id().to_string()));
    }
    m.map_tensors(m.model_id(), |t| {
        Ok(match mode {
            QuantMode::F16 => t
                .data()
                .iter()
                .map(|&v| half::f16::from_f32(v).to_f32())
                .collect(),
            QuantMode::Int8 => {
                let max = t.data().iter().fold(0.0f32, |a, v| a.max(v.abs()));
                if max == 0.0 {
                    t.data().to_vec()
                } else {
                    let scale = max / 127.0;
                    t.data()
                        .iter()
                        .map(|&v| (v / scale).round().clamp(-127.0, 127.0) * scale)
                        .collect()
                }
            }
        })
    })
}

/// Entrywise mean of two models with identical layouts.
pub fn merge_models(u: &ModelWeights, v: &ModelWeights, id: &str) -> Result<ModelWeights> {
    if u.tensors().len() != v.tensors().len() {
        return Err(Error::InvalidInput(format!(
            "cannot merge `{}` and `{}`: layer counts differ",
            u.model_id(),
            v.model_id()
        )));
    }
    u.map_tensors(id, |a| {
        let b = v.get(a.name()).ok_or_else(|| {
            Error::InvalidInput(format!("layer `{}` missing from `{}`", a.name(), v.model_id()))
        })?;
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                name: a.name().to_string(),
                left: a.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        Ok(a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((x as f64 + y as f64) / 2.0) as f32)
            .collect())
    })
}

pub const MODELS_DIR: &str = "models";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";

/// Writes `models/<id>.safetensors`, `manifest.json` and `config.json`.
pub fn save_population(
    dir: &Path,
    models: &[ModelWeights],
    manifest: &GraphManifest,
    config: &serde_json::Value,
) -> Result<()> {
    let models_dir = dir.join(MODELS_DIR);
    std::fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;
    models.par_iter().try_for_each(|m| {
        weightstore::save_model(m, models_dir.join(format!("{}.safetensors", m.model_id())))
    })?;
    weightstore::save_manifest(manifest, dir.join(MANIFEST_FILE))?;
    let path = dir.join(CONFIG_FILE);
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
