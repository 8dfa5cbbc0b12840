use goodd::autodiff::Tape;
use goodd::contrast::{graph_loss, kmeans, node_loss, ContrastOptions};
use goodd::encoder::ModelConfig;
use goodd::graphdata::{generate_synthetic_pair, Graph};
use goodd::matrix::Matrix;
use goodd::scoring::{auc, per_sample_errors, ScoreOptions};
use goodd::structenc::{encode_dataset, structural_encoding};
use goodd::trainer::{make_batches, train, TrainConfig};
use proptest::prelude::*;

fn graph_strategy() -> impl Strategy<Value = (Graph, Vec<usize>)> {
    (1usize..16)
        .prop_flat_map(|n| {
            let pairs = n * (n - 1) / 2;
            (
                Just(n),
                proptest::collection::vec(any::<bool>(), pairs),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
        })
        .prop_map(|(n, mask, perm)| {
            let mut edges = Vec::new();
            let mut k = 0;
            for i in 0..n {
                for j in i + 1..n {
                    if mask[k] {
                        edges.push((i, j));
                    }
                    k += 1;
                }
            }
            (Graph::unattributed(n, &edges, None).unwrap(), perm)
        })
}

fn matrix_strategy(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn graph_error(z_f: &Matrix, z_s: &Matrix) -> Vec<f64> {
    let mut t = Tape::new();
    let (f, s) = (t.constant(z_f.clone()), t.constant(z_s.clone()));
    let opts = ContrastOptions {
        temperature: 0.2,
        include_positive: false,
    };
    graph_loss(&mut t, f, s, &opts).unwrap().per_graph
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn structural_encoding_follows_node_relabelling((g, perm) in graph_strategy(), d_rw in 1usize..6, d_dg in 1usize..6) {
        let a = structural_encoding(&g, d_rw, d_dg).unwrap().matrix;
        let b = structural_encoding(&g.permute_nodes(&perm).unwrap(), d_rw, d_dg).unwrap().matrix;
        prop_assert!(a.permute_rows(&perm).max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_count(
        data in proptest::collection::vec((0u8..5, any::<bool>()), 2..40)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64).collect();
        let mut labels: Vec<u8> = data.iter().map(|d| d.1 as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let got = auc(&scores, &labels).unwrap();
        prop_assert!((got - pairwise_auc(&scores, &labels)).abs() <= 1e-12);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((got + auc(&scores, &flipped).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn batches_partition_the_training_set(n in 1usize..200, b in 2usize..70, seed in any::<u64>(), epoch in 0usize..5) {
        let batches = make_batches(n, b, seed, epoch);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        for batch in &batches {
            prop_assert!(batch.len() <= b + 1);
            prop_assert!(batch.len() >= 2 || n == 1);
        }
        prop_assert_eq!(&batches, &make_batches(n, b, seed, epoch));
    }

    #[test]
    fn graph_loss_ignores_row_scale_and_rotation(
        z_f in matrix_strategy(5, 4),
        z_s in matrix_strategy(5, 4),
        scales in proptest::collection::vec(0.1f64..10.0, 5),
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        prop_assume!((0..5).all(|i| z_f.row(i).iter().any(|v| v.abs() > 1e-3) && z_s.row(i).iter().any(|v| v.abs() > 1e-3)));
        let base = graph_error(&z_f, &z_s);
        let mut scaled = z_f.clone();
        for (i, s) in scales.iter().enumerate() {
            for c in 0..4 {
                scaled.set(i, c, z_f.get(i, c) * s);
            }
        }
        let (c, s) = (angle.cos(), angle.sin());
        let rot = Matrix::from_rows(&[
            vec![c, -s, 0.0, 0.0],
            vec![s, c, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ]).unwrap();
        let moved = graph_error(&scaled.matmul(&rot).unwrap(), &z_s.matmul(&rot).unwrap());
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn node_loss_per_graph_is_independent_of_batch_mates(
        z in matrix_strategy(7, 3),
        w in matrix_strategy(7, 3),
    ) {
        prop_assume!((0..7).all(|i| z.row(i).iter().any(|v| v.abs() > 1e-3) && w.row(i).iter().any(|v| v.abs() > 1e-3)));
        let opts = ContrastOptions { temperature: 0.5, include_positive: false };
        let mut t = Tape::new();
        let (a, b) = (t.constant(z.clone()), t.constant(w.clone()));
        let joint = node_loss(&mut t, a, b, &[0, 3, 7], &opts).unwrap().per_graph;
        let head = |m: &Matrix| Matrix::from_rows(&(0..3).map(|i| m.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (a1, b1) = (t.constant(head(&z)), t.constant(head(&w)));
        let alone = node_loss(&mut t, a1, b1, &[0, 3], &opts).unwrap().per_graph;
        prop_assert!((joint[0] - alone[0]).abs() <= 1e-12);
    }

    #[test]
    fn kmeans_assigns_every_point_to_a_valid_cluster(data in matrix_strategy(30, 3), k in 1usize..8, seed in any::<u64>()) {
        let km = kmeans(&data, k, seed).unwrap();
        prop_assert_eq!(km.centers.rows(), k);
        prop_assert_eq!(km.assignments.len(), 30);
        prop_assert!(km.assignments.iter().all(|&a| a < k));
        for pair in km.objective.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-9);
        }
    }
}

#[test]
fn duplicate_graphs_get_identical_errors() {
    let (id, _) = generate_synthetic_pair(30, 3).unwrap();
    let cfg = ModelConfig {
        hidden_dim: 8,
        proj_dim: 8,
        clusters: 3,
        ..ModelConfig::default()
    };
    let enc = encode_dataset(&id, cfg.rw_steps, cfg.degree_buckets).unwrap();
    let tcfg = TrainConfig {
        epochs: 3,
        batch_size: 10,
        ..TrainConfig::default()
    };
    let (model, _) = train(&id, &enc, &cfg, &tcfg).unwrap();
    let g = &id.graphs()[0];
    let graphs = vec![g, &id.graphs()[1], g, &id.graphs()[2], g];
    let encs: Vec<&Matrix> = [0, 1, 0, 2, 0].iter().map(|&i| &enc[i]).collect();
    let errors = per_sample_errors(&model, &graphs, &encs, &ScoreOptions::default()).unwrap();
    for level in [&errors.node, &errors.graph, &errors.group] {
        assert_eq!(level[0], level[2]);
        assert_eq!(level[0], level[4]);
    }
}
