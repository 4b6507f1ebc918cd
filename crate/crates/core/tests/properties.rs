#![allow(clippy::needless_range_loop)]

use std::sync::Arc;

use mother_core::arborescence::{best_arborescence, is_arborescence, tree_cost};
use mother_core::clustering::{label_accuracy, single_linkage};
use mother_core::matrices::{combine, direction_matrix, stage_matrix, Matrix};
use mother_core::metrics::{self, LayerFilter, MetricConfig};
use mother_core::recovery::{evaluate, random_parent_baseline, RecoveredGraph};
use mother_core::weightstore::{decode_model, encode_model, LoadOptions};
use mother_core::{
    chu_liu_edmonds, enumerate_arborescences, Arborescence, FineTuneKind, GraphManifest,
    ManifestNode, ModelWeights, Stage, TensorRecord,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(n: usize, cell: impl Strategy<Value = f64> + Clone) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(proptest::collection::vec(cell, n), n).prop_map(|mut m| {
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = f64::INFINITY;
        }
        m
    })
}

fn cost_matrix() -> impl Strategy<Value = Matrix> {
    (2usize..=6).prop_flat_map(|n| {
        prop_oneof![
            square(n, (0u8..4).prop_map(f64::from)),
            square(n, 0.0f64..100.0),
        ]
    })
}

fn model(id: &str, layers: &[(String, Vec<f32>)]) -> ModelWeights {
    ModelWeights::new(
        id,
        layers
            .iter()
            .map(|(n, d)| TensorRecord::new(n.clone(), vec![d.len()], d.clone()).unwrap())
            .collect(),
    )
    .unwrap()
}

fn model_triple() -> impl Strategy<Value = [ModelWeights; 3]> {
    (1usize..4, 1usize..40).prop_flat_map(|(layers, len)| {
        let layer = proptest::collection::vec(-10.0f32..10.0, len);
        proptest::collection::vec(proptest::collection::vec(layer, layers), 3).prop_map(
            move |ms| {
                let named = |i: usize| -> Vec<(String, Vec<f32>)> {
                    ms[i]
                        .iter()
                        .enumerate()
                        .map(|(l, d)| (format!("l{l}.dense"), d.clone()))
                        .collect()
                };
                [model("a", &named(0)), model("b", &named(1)), model("c", &named(2))]
            },
        )
    })
}

proptest! {
    #[test]
    fn cle_is_optimal(m in cost_matrix(), root_pick in 0usize..6) {
        let root = root_pick % m.len();
        let got = chu_liu_edmonds(&m, root).unwrap();
        prop_assert!(is_arborescence(&got.parent));
        prop_assert_eq!(got.root, root);
        prop_assert_eq!(got.total_cost, tree_cost(&m, &got.parent));
        let best = enumerate_arborescences(&m, root)
            .unwrap()
            .into_iter()
            .map(|(_, c)| c)
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(got.total_cost, best);
    }

    #[test]
    fn best_root_is_no_worse_than_any_root(m in cost_matrix()) {
        let best = best_arborescence(&m, None, None).unwrap();
        for r in 0..m.len() {
            prop_assert!(best.total_cost <= chu_liu_edmonds(&m, r).unwrap().total_cost);
        }
    }

    #[test]
    fn penalty_is_zero_or_lambda(
        d in (2usize..7).prop_flat_map(|n| square(n, 0.1f64..5.0).prop_map(|mut m| {
            // Symmetrize.
            for i in 0..m.len() {
                for j in 0..i {
                    m[i][j] = m[j][i];
                }
            }
            m
        })),
        seed in any::<u64>(),
        c in 0.0f64..5.0,
    ) {
        let n = d.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u8..3))).collect();
        let stages: Vec<Stage> = (0..n)
            .map(|_| if rng.random_bool(0.5) { Stage::Generalization } else { Stage::Specialization })
            .collect();
        let k = direction_matrix(&scores);
        let t = stage_matrix(&stages);
        let (lambda, m) = combine(&d, &k, &t, c).unwrap();
        for i in 0..n {
            prop_assert!(m[i][i].is_infinite());
            for j in 0..n {
                if i == j {
                    continue;
                }
                // K is antisymmetric away from ties.
                prop_assert_eq!(k[i][j] + k[j][i], u8::from(scores[i] != scores[j]));
                let extra = m[i][j] - d[i][j];
                let expect = if k[i][j] != t[i][j] { lambda } else { 0.0 };
                prop_assert!((extra - expect).abs() <= 1e-12 * (1.0 + lambda));
            }
        }
    }

    #[test]
    fn single_linkage_labels_are_canonical(
        d in (1usize..9).prop_flat_map(|n| square(n, 0.0f64..10.0).prop_map(|mut m| {
            for i in 0..m.len() {
                for j in 0..i {
                    m[i][j] = m[j][i];
                }
            }
            m
        })),
        k_pick in 1usize..9,
    ) {
        let k = 1 + (k_pick - 1) % d.len();
        let a = single_linkage(&d, k).unwrap();
        let mut next = 0;
        for &l in &a.labels {
            prop_assert!(l <= next);
            if l == next {
                next += 1;
            }
        }
        prop_assert_eq!(next, k);
        prop_assert_eq!(a.members().len(), k);
    }

    #[test]
    fn label_accuracy_ignores_label_names(
        truth in proptest::collection::vec(0usize..4, 1..30),
        pred in proptest::collection::vec(0usize..4, 30),
        seed in any::<u64>(),
    ) {
        let pred = &pred[..truth.len()];
        prop_assert_eq!(label_accuracy(&truth, &truth), 1.0);
        let mut perm: Vec<usize> = (0..4).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let renamed: Vec<usize> = pred.iter().map(|&l| perm[l]).collect();
        let a = label_accuracy(pred, &truth);
        prop_assert!((a - label_accuracy(&renamed, &truth)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn checkpoint_round_trip(
        layers in proptest::collection::btree_map("[a-z]{1,8}", proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..20), 1..5),
    ) {
        let named: Vec<(String, Vec<f32>)> = layers.into_iter().collect();
        let m = model("round-trip", &named);
        let bytes = encode_model(&m).unwrap();
        let back = decode_model(&bytes, "fallback", LoadOptions::default()).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(encode_model(&back).unwrap(), bytes);
    }

    #[test]
    fn ft_distance_is_a_metric([a, b, c] in model_triple()) {
        let cfg = MetricConfig { distance_filter: LayerFilter::all(), ..MetricConfig::default() };
        let d = |x: &ModelWeights, y: &ModelWeights| metrics::ft_distance(x, y, &cfg).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn kurtosis_is_affine_invariant_and_bounded(
        x in proptest::collection::vec(-1000i32..1000, 4..200),
        scale in 1i32..8,
        shift in -64i32..64,
    ) {
        prop_assume!(x.iter().any(|&v| v != x[0]));
        // Values on an exact grid so the affine map is exact in f32.
        let base: Vec<f32> = x.iter().map(|&v| v as f32 / 64.0).collect();
        let moved: Vec<f32> = base.iter().map(|&v| v * scale as f32 + shift as f32).collect();
        let k = metrics::layer_statistic(&base, metrics::DirectionalStatistic::Kurtosis).unwrap();
        let k2 = metrics::layer_statistic(&moved, metrics::DirectionalStatistic::Kurtosis).unwrap();
        prop_assert!(k >= 1.0 - 1e-12);
        prop_assert!((k - k2).abs() <= 1e-9 * k);
    }

    #[test]
    fn lora_distance_matches_update_rank(rank in 1usize..5, seed in any::<u64>()) {
        let (rows, cols) = (8usize, 6usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Small-integer factors keep every entry exact in f32.
        let a: Vec<Vec<f32>> = (0..rows).map(|_| (0..rank).map(|_| rng.random_range(-3i8..=3) as f32).collect()).collect();
        let b: Vec<Vec<f32>> = (0..cols).map(|_| (0..rank).map(|_| rng.random_range(-3i8..=3) as f32).collect()).collect();
        let base: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-8i8..=8) as f32 / 4.0).collect();
        let delta: Vec<f32> = (0..rows * cols)
            .map(|idx| (0..rank).map(|r| a[idx / cols][r] * b[idx % cols][r]).sum())
            .collect();
        let child: Vec<f32> = base.iter().zip(&delta).map(|(x, d)| x + d).collect();
        let expected = {
            let m = nalgebra::DMatrix::from_row_slice(rows, cols, &delta.iter().map(|&v| v as f64).collect::<Vec<_>>());
            m.rank(1e-9)
        };
        let mk = |id: &str, d: Vec<f32>| ModelWeights::new(id, vec![TensorRecord::new("w", vec![rows, cols], d).unwrap()]).unwrap();
        let cfg = MetricConfig { distance_filter: LayerFilter::all(), ..MetricConfig::default() };
        prop_assert_eq!(metrics::lora_distance(&mk("p", base), &mk("c", child), &cfg).unwrap(), expected);
    }
}

fn star_manifest(n_children: usize) -> GraphManifest {
    let mut nodes = vec![ManifestNode {
        model_id: "r".into(),
        parent_id: None,
        stage: Stage::Specialization,
        kind: FineTuneKind::Full,
        tree: None,
    }];
    for i in 0..n_children {
        nodes.push(ManifestNode {
            model_id: format!("c{i}"),
            parent_id: Some("r".into()),
            stage: Stage::Specialization,
            kind: FineTuneKind::Full,
            tree: None,
        });
    }
    GraphManifest::new(nodes).unwrap()
}

/// Random parents within the tree score close to the `1 / (n - 1)` baseline.
#[test]
fn shuffled_prediction_scores_near_baseline() {
    let truth = star_manifest(20);
    let ids: Vec<String> = truth.ids();
    let n = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 2000;
    let mut total = 0.0;
    for _ in 0..trials {
        // A random arborescence: random order, each node attaches to a
        // uniformly chosen earlier node.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut parent = vec![None; n];
        for (pos, &v) in order.iter().enumerate().skip(1) {
            parent[v] = Some(order[rng.random_range(0..pos)]);
        }
        let graph = RecoveredGraph {
            trees: vec![mother_core::recovery::RecoveredTree {
                nodes: ids.clone(),
                arborescence: Arborescence { root: order[0], parent, total_cost: 0.0 },
                lambda: 0.0,
            }],
            provenance: serde_json::from_value(serde_json::json!({
                "tool_version": "test", "metric": "ft", "c": 0.3, "epsilon_rel": 1e-5, "k": 1,
                "root_policy": "all", "cluster_mode": {"type": "full"},
                "distance_filter": "", "score_filter": "dense"
            }))
            .unwrap(),
        };
        total += evaluate(&graph, &truth).unwrap().graph_accuracy;
    }
    let mean = total / trials as f64;
    let baseline = random_parent_baseline(&truth);
    assert!((baseline - 0.05).abs() < 1e-12);
    // Random recursive trees attach to the root more often than uniform
    // parents would, so only the order of magnitude is pinned.
    assert!(mean > 0.5 * baseline && mean < 4.0 * baseline, "mean {mean}");
}

#[test]
fn shared_weights_are_not_copied() {
    let m = Arc::new(model("a", &[("w".into(), vec![1.0, 2.0])]));
    let node = mother_core::ModelNode::new(Arc::clone(&m), Stage::Specialization);
    assert!(Arc::ptr_eq(&node.weights, &m));
}
