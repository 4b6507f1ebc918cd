//! Recovering the heritage of neural-network checkpoints from their weights.
//!
//! Given a population of models, the pipeline clusters them into trees,
//! builds per-tree cost matrices from a weight distance, a directional
//! weight score and the known training stages, and solves a minimum directed
//! spanning arborescence per tree. A simulator produces populations with
//! known ground truth for testing.

pub mod arborescence;
pub mod clustering;
pub mod error;
pub mod matrices;
pub mod metrics;
pub mod numeric;
pub mod recovery;
pub mod simgen;
pub mod weightstore;

pub use arborescence::{best_arborescence, chu_liu_edmonds, enumerate_arborescences, Arborescence};
pub use clustering::{cluster_models, clustering_accuracy, ClusterAssignment, ClusterMode};
pub use error::{Error, Result};
pub use matrices::{CostMatrices, DistanceMetric, ModelNode, NodeSet};
pub use metrics::{DirectionalStatistic, LayerFilter, MetricConfig};
pub use recovery::{evaluate, recover, EvalReport, RecoveredGraph, RecoveryConfig, RootPolicy};
pub use weightstore::{
    load_manifest, load_model, save_manifest, save_model, FineTuneKind, GraphManifest,
    ManifestNode, ModelWeights, Stage, TensorRecord,
};

/// Version string embedded in every exported artifact.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
