mod common;

use admp::centrality::{bucketize, kcore, pagerank, walk_count2, Metric, PageRankParams};
use admp::dataset::{
    build_synthetic, load_dataset, planted_source, save_dataset, Dataset, PlantedSpec,
    SyntheticSpec,
};
use admp::graph::{NormAdjacency, NormKind, SplitKind};
use admp::model::{extract_standard_gnn, forward, Flavor, Mode, ModelShape};
use admp::policy::{
    apply_policy, learn_policy, oracle_accuracy, per_layer_accuracy, ExitPolicy, PredictionCube,
};
use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn flavor() -> impl Strategy<Value = Flavor> {
    prop_oneof![Just(Flavor::Gcn), Just(Flavor::Gin)]
}

fn random_cube(
    r: &mut rand_chacha::ChaCha8Rng,
    n: usize,
    layers: usize,
    c: usize,
) -> PredictionCube {
    let probs = (0..layers)
        .map(|_| {
            let mut p = Array2::from_shape_fn((n, c), |_| r.gen_range(0.0..1.0));
            for mut row in p.rows_mut() {
                let s = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            p
        })
        .collect();
    PredictionCube::new(probs).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn spmm_matches_dense_product(seed in any::<u64>(), n in 1usize..25, k in 1usize..6) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 3, 2, 0.25);
        let x = Array2::from_shape_fn((n, k), |_| r.gen_range(-2.0..2.0));
        let gcn = NormAdjacency::new(&g, NormKind::GcnSymmetric);
        prop_assert!(max_abs_diff(&gcn.spmm(&x).unwrap(), &naive_matmul(&dense_gcn_operator(&g), &x)) <= 1e-12);
        let raw = NormAdjacency::new(&g, NormKind::RawSum);
        prop_assert!(max_abs_diff(&raw.spmm(&x).unwrap(), &naive_matmul(&dense_adjacency(&g), &x)) <= 1e-12);
    }

    #[test]
    fn forward_is_permutation_equivariant(seed in any::<u64>(), n in 2usize..16, f in flavor(), depth in 0usize..4) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 4, 3, 0.3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let h = g.relabel(&perm).unwrap();
        let shape = ModelShape { flavor: f, depth, in_dim: 4, hidden: 5, n_classes: 3 };
        let params = random_params(&mut r, shape);
        let a = forward(&params, &g, &NormAdjacency::new(&g, f.norm_kind()), Mode::Eval, 0.0, 0).unwrap();
        let b = forward(&params, &h, &NormAdjacency::new(&h, f.norm_kind()), Mode::Eval, 0.0, 0).unwrap();
        for l in 0..=depth {
            for v in 0..n {
                for j in 0..3 {
                    prop_assert!((a.probs[l][[v, j]] - b.probs[l][[perm[v], j]]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn exits_equal_extracted_networks(seed in any::<u64>(), n in 1usize..20, f in flavor(), depth in 0usize..5, train in any::<bool>()) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 6, 3, 0.3);
        let shape = ModelShape { flavor: f, depth, in_dim: 6, hidden: 7, n_classes: 3 };
        let params = random_params(&mut r, shape);
        let adj = NormAdjacency::new(&g, f.norm_kind());
        let (mode, p) = if train { (Mode::Train, 0.5) } else { (Mode::Eval, 0.0) };
        let out = forward(&params, &g, &adj, mode, p, seed).unwrap();
        for l in 0..=depth {
            let probs = extract_standard_gnn(&params, l).unwrap().predict(g.features(), &adj, mode, p, seed).unwrap();
            prop_assert!(max_abs_diff(&probs, &out.probs[l]) <= 1e-12);
        }
    }

    #[test]
    fn exits_match_dense_reference(seed in any::<u64>(), n in 1usize..14, f in flavor(), depth in 0usize..4) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 4, 2, 0.35);
        let params = random_params(&mut r, ModelShape { flavor: f, depth, in_dim: 4, hidden: 3, n_classes: 2 });
        let out = forward(&params, &g, &NormAdjacency::new(&g, f.norm_kind()), Mode::Eval, 0.0, 0).unwrap();
        for (l, lp) in naive_logprobs(&params, &g).iter().enumerate() {
            prop_assert!(max_abs_diff(&lp.mapv(f64::exp), &out.probs[l]) <= 1e-12);
        }
    }

    #[test]
    fn truncation_keeps_prefix(seed in any::<u64>(), f in flavor(), depth in 1usize..5) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, 12, 4, 3, 0.3);
        let params = random_params(&mut r, ModelShape { flavor: f, depth, in_dim: 4, hidden: 4, n_classes: 3 });
        let cut = r.gen_range(0..=depth);
        let adj = NormAdjacency::new(&g, f.norm_kind());
        let full = forward(&params, &g, &adj, Mode::Train, 0.3, seed).unwrap();
        let short = forward(&params.truncated(cut).unwrap(), &g, &adj, Mode::Train, 0.3, seed).unwrap();
        for l in 0..=cut {
            prop_assert_eq!(&full.probs[l], &short.probs[l]);
        }
    }

    #[test]
    fn walk_count_is_a_squared_times_ones(seed in any::<u64>(), n in 1usize..30) {
        let mut r = rng(seed);
        let p = r.gen_range(0.0..0.5);
        let g = random_graph(&mut r, n, 1, 1, p);
        let a = dense_adjacency(&g);
        let a2 = naive_matmul(&a, &a);
        let w = walk_count2(&g);
        for v in 0..n {
            prop_assert_eq!(w.values[v], a2.row(v).sum());
        }
    }

    #[test]
    fn pagerank_sums_to_one_and_follows_relabeling(seed in any::<u64>(), n in 1usize..30) {
        let mut r = rng(seed);
        let p = r.gen_range(0.0..0.4);
        let g = random_graph(&mut r, n, 1, 1, p);
        let pr = pagerank(&g, PageRankParams::default()).unwrap();
        prop_assert!((pr.values.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pr2 = pagerank(&g.relabel(&perm).unwrap(), PageRankParams::default()).unwrap();
        for v in 0..n {
            prop_assert!((pr.values[v] - pr2.values[perm[v]]).abs() <= 1e-9);
        }
    }

    #[test]
    fn buckets_are_balanced_and_ordered(seed in any::<u64>(), n in 1usize..60, metric in 0usize..4) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 1, 1, 0.15);
        let cv = Metric::ALL[metric].compute(&g).unwrap();
        let c = r.gen_range(1..=n.min(10));
        let b = bucketize(&cv, c, &vec![true; n]).unwrap();
        let sizes: Vec<usize> = (0..c).map(|k| b.members(k).count()).collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for u in 0..n {
            for v in 0..n {
                if cv.values[u] < cv.values[v] {
                    prop_assert!(b.bucket_of[u] <= b.bucket_of[v]);
                }
            }
        }
    }

    #[test]
    fn oracle_dominates_every_layer(seed in any::<u64>(), n in 1usize..40, layers in 1usize..7) {
        let mut r = rng(seed);
        let cube = random_cube(&mut r, n, layers, 3);
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        mask[0] = true;
        let oracle = oracle_accuracy(&cube, &labels, &mask).unwrap();
        let best = per_layer_accuracy(&cube, &labels, &mask).unwrap().into_iter().fold(0.0, f64::max);
        prop_assert!(oracle >= best);
    }

    #[test]
    fn constant_policy_reproduces_layer_accuracy(seed in any::<u64>(), n in 2usize..40, layers in 1usize..6) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 1, 3, 0.2);
        let cube = random_cube(&mut r, n, layers, 3);
        let cv = Metric::Degree.compute(&g).unwrap();
        let buckets = bucketize(&cv, r.gen_range(1..=n.min(5)), &vec![true; n]).unwrap();
        let all = vec![true; n];
        let per_layer = per_layer_accuracy(&cube, g.labels(), &all).unwrap();
        for (l, &acc) in per_layer.iter().enumerate() {
            let policy = ExitPolicy {
                metric: Metric::Degree,
                n_buckets: buckets.n_buckets,
                boundaries: buckets.boundaries.clone(),
                exit_layers: vec![l; buckets.n_buckets],
            };
            let out = apply_policy(&cube, &policy, &buckets).unwrap();
            prop_assert_eq!(out.accuracy(g.labels(), &all).unwrap(), acc);
        }
    }

    #[test]
    fn policy_ignores_test_labels(seed in any::<u64>(), n in 3usize..40, layers in 1usize..6) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 1, 3, 0.2);
        let cube = random_cube(&mut r, n, layers, 3);
        let cv = Metric::KCore.compute(&g).unwrap();
        let buckets = bucketize(&cv, r.gen_range(1..=n.min(5)), &vec![true; n]).unwrap();
        let val = g.mask(SplitKind::Val);
        let a = learn_policy(&cube, g.labels(), val, &buckets, Metric::KCore).unwrap();
        let mut scrambled = g.labels().to_vec();
        for v in 0..n {
            if g.mask(SplitKind::Test)[v] {
                scrambled[v] = r.gen_range(0..3);
            }
        }
        let b = learn_policy(&cube, &scrambled, val, &buckets, Metric::KCore).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn dataset_round_trip(seed in any::<u64>(), n in 1usize..60) {
        let mut r = rng(seed);
        let g = random_graph(&mut r, n, 3, 4, 0.1);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&Dataset::new("random", g.clone()), dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap().graph;
        prop_assert_eq!(back.features(), g.features());
        prop_assert_eq!(back.labels(), g.labels());
        prop_assert_eq!(back.split(), g.split());
        prop_assert_eq!(back.edges().collect::<Vec<_>>(), g.edges().collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kcore_matches_peeling(seed in any::<u64>(), n in 1usize..=30) {
        let mut r = rng(seed);
        let p = r.gen_range(0.0..0.6);
        let g = random_graph(&mut r, n, 1, 1, p);
        let fast = kcore(&g);
        let slow = peeling_core_numbers(&g);
        for v in 0..n {
            prop_assert_eq!(fast.values[v], slow[v] as f64);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn synthetic_regions_are_disjoint_and_balanced(seed in any::<u64>(), half in 20usize..80, classes in 2usize..5) {
        let source = planted_source(&PlantedSpec {
            n_dense: 2 * half,
            n_sparse: 2 * half,
            n_classes: classes,
            n_features: 4,
            seed,
            ..PlantedSpec::default()
        }).unwrap();
        let ds = build_synthetic(&source, &SyntheticSpec { n_total: 2 * half, seed, ..SyntheticSpec::default() }).unwrap();
        let regions = ds.regions.as_ref().unwrap();
        let g = &ds.graph;
        prop_assert_eq!(g.n_nodes(), 2 * half);
        for (u, v) in g.edges() {
            prop_assert_eq!(regions.of_node[u], regions.of_node[v]);
        }
        let mut hist = vec![[0i64; 2]; g.n_classes()];
        for v in 0..g.n_nodes() {
            hist[g.labels()[v]][regions.of_node[v] as usize] += 1;
        }
        prop_assert_eq!(hist.iter().map(|h| h[0]).sum::<i64>(), half as i64);
        for h in hist {
            prop_assert!((h[0] - h[1]).abs() <= 1);
        }
    }
}
