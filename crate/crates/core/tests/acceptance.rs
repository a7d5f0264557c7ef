//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always reach stdout. The
//! benchmark reproductions read `$ADMP_DATA_DIR/{cora,citeseer}`; when a
//! dataset is missing they print FAIL with a `blocked` note and do not fail
//! the process, everything else does.

mod common;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use admp::centrality::{kcore, pagerank, walk_count2, Metric, PageRankParams};
use admp::dataset::{
    build_synthetic, depth_sweep, load_dataset, planted_source, save_dataset, sweep_config,
    write_sweep_csv, Dataset, PlantedSpec, SweepRow, SyntheticSpec,
};
use admp::graph::{Graph, NormAdjacency, SplitKind};
use admp::harness::{evaluate_policy, run_seeds, SeedRun};
use admp::model::{extract_standard_gnn, forward, AdmpParams, Flavor, Mode, ModelShape};
use admp::policy::{oracle_accuracy, per_layer_accuracy};
use admp::report::mean_std;
use admp::train::{train_st, write_metrics_csv, Paradigm, TrainConfig};
use common::*;
use rand::seq::SliceRandom;
use rand::Rng;

enum Status {
    Pass,
    Fail,
    Blocked,
}

struct Outcome {
    status: Status,
    detail: String,
}

fn verdict(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..16 {
        for flavor in [Flavor::Gcn, Flavor::Gin] {
            worst = worst.max(check_instance(1000 + seed, flavor));
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-5 && secs < 60.0,
        format!("{count} instances, worst relative error {worst:.2e}, {secs:.2}s"),
    )
}

fn exit_prefix() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let flavor = if seed % 2 == 0 {
            Flavor::Gcn
        } else {
            Flavor::Gin
        };
        let n = r.gen_range(1..40);
        let d = r.gen_range(1..10);
        let g = random_graph(&mut r, n, d, 4, 0.2);
        let depth = r.gen_range(0..6);
        let shape = ModelShape {
            flavor,
            depth,
            in_dim: d,
            hidden: r.gen_range(1..12),
            n_classes: 4,
        };
        let params = random_params(&mut r, shape);
        let adj = NormAdjacency::new(&g, flavor.norm_kind());
        let out = forward(&params, &g, &adj, Mode::Eval, 0.0, 0).unwrap();
        for l in 0..=depth {
            let std = extract_standard_gnn(&params, l).unwrap();
            let probs = std.predict(g.features(), &adj, Mode::Eval, 0.0, 0).unwrap();
            worst = worst.max(max_abs_diff(&probs, &out.probs[l]));
            count += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst <= 1e-12 && secs < 10.0,
        format!("{count} exits, max |difference| {worst:.1e}, {secs:.2}s"),
    )
}

fn planted(n: usize, seed: u64) -> Dataset {
    let per_region = n * 3 / 4;
    let source = planted_source(&PlantedSpec {
        n_dense: per_region,
        n_sparse: per_region,
        seed,
        ..PlantedSpec::default()
    })
    .unwrap();
    build_synthetic(
        &source,
        &SyntheticSpec {
            n_total: n,
            seed,
            ..SyntheticSpec::default()
        },
    )
    .unwrap()
}

fn st_freezing() -> Outcome {
    let g = planted(300, 2).graph;
    let mut checked = 0;
    for flavor in [Flavor::Gcn, Flavor::Gin] {
        for seed in 0..10 {
            let cfg = TrainConfig {
                flavor,
                layers: 4,
                hidden: 16,
                epochs: 40,
                patience: 10,
                seed,
                ..TrainConfig::default()
            };
            let adj = NormAdjacency::new(&g, flavor.norm_kind());
            let mut params = AdmpParams::init(
                ModelShape {
                    flavor,
                    depth: 4,
                    in_dim: g.n_features(),
                    hidden: 16,
                    n_classes: g.n_classes(),
                },
                seed,
            );
            let report = train_st(&mut params, &g, &adj, &cfg).unwrap();
            if let Err(e) = report.ledger.verify_freezing() {
                return verdict(false, format!("{flavor} seed {seed}: {e}"));
            }
            for t in 0..4 {
                for id in params.stage_group(t) {
                    let sum = params.get(id).checksum();
                    for later in &report.ledger.stages[t + 1..] {
                        if later.frozen_before[&id] != sum || later.frozen_after[&id] != sum {
                            return verdict(
                                false,
                                format!(
                                    "{flavor} seed {seed}: {id} moved in stage {}",
                                    later.stage
                                ),
                            );
                        }
                        checked += 1;
                    }
                }
            }
        }
    }
    verdict(
        true,
        format!("{checked} frozen checksums stable over 20 runs"),
    )
}

fn centrality_oracles() -> Outcome {
    let mut r = rng(7);
    for i in 0..100 {
        let n = r.gen_range(1..=30);
        let p = r.gen_range(0.0..0.6);
        let g = random_graph(&mut r, n, 1, 1, p);
        let fast = kcore(&g).values;
        let slow = peeling_core_numbers(&g);
        if fast.iter().zip(&slow).any(|(&a, &b)| a != b as f64) {
            return verdict(false, format!("k-core differs on graph {i}"));
        }
        let a = dense_adjacency(&g);
        let a2 = naive_matmul(&a, &a);
        if walk_count2(&g)
            .values
            .iter()
            .enumerate()
            .any(|(v, &w)| w != a2.row(v).sum())
        {
            return verdict(false, format!("walk count differs on graph {i}"));
        }
        let pr = pagerank(&g, PageRankParams::default()).unwrap().values;
        let total: f64 = pr.iter().sum();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let pr2 = pagerank(&g.relabel(&perm).unwrap(), PageRankParams::default())
            .unwrap()
            .values;
        if (total - 1.0).abs() > 1e-9 || (0..n).any(|v| (pr[v] - pr2[perm[v]]).abs() > 1e-9) {
            return verdict(
                false,
                format!("pagerank sum {total} or relabeling off on graph {i}"),
            );
        }
    }
    verdict(
        true,
        "100 graphs: k-core = peeling, walk = A²·1, pagerank sums to 1".into(),
    )
}

fn oracle_dominance() -> Outcome {
    let g = planted(300, 4).graph;
    let cfg = TrainConfig {
        layers: 4,
        hidden: 16,
        epochs: 40,
        patience: 10,
        ..TrainConfig::default()
    };
    let runs = run_seeds(&g, &cfg, &[0, 1, 2]).unwrap();
    for run in &runs {
        for split in SplitKind::ALL {
            let oracle = run.oracle(&g, split).unwrap();
            let best = run
                .layer_accuracy(&g, split)
                .unwrap()
                .into_iter()
                .fold(0.0, f64::max);
            if oracle < best {
                return verdict(
                    false,
                    format!(
                        "seed {} {}: oracle {oracle} < {best}",
                        run.seed,
                        split.name()
                    ),
                );
            }
        }
    }
    let mut r = rng(11);
    for _ in 0..500 {
        let n = r.gen_range(1..50);
        let cube = admp::policy::PredictionCube::new(
            (0..r.gen_range(1..7))
                .map(|_| ndarray::Array2::from_shape_fn((n, 3), |_| r.gen_range(0.0..1.0)))
                .collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
        let mask = vec![true; n];
        let oracle = oracle_accuracy(&cube, &labels, &mask).unwrap();
        let best = per_layer_accuracy(&cube, &labels, &mask)
            .unwrap()
            .into_iter()
            .fold(0.0, f64::max);
        if oracle < best {
            return verdict(false, format!("random cube: oracle {oracle} < {best}"));
        }
    }
    verdict(
        true,
        "3 trained models x 3 splits and 500 random cubes".into(),
    )
}

fn benchmark(name: &str) -> Result<Dataset, Outcome> {
    let Some(root) = std::env::var_os("ADMP_DATA_DIR") else {
        return Err(Outcome {
            status: Status::Blocked,
            detail: format!("ADMP_DATA_DIR is not set, no {name} container"),
        });
    };
    let dir = PathBuf::from(root).join(name);
    load_dataset(&dir).map_err(|e| Outcome {
        status: Status::Blocked,
        detail: format!("{}: {e}", dir.display()),
    })
}

fn benchmark_runs(g: &Graph, name: &str, paradigm: Paradigm) -> Vec<SeedRun> {
    let cfg = TrainConfig {
        paradigm,
        layers: 5,
        ..TrainConfig::preset(name).unwrap()
    };
    let seeds: Vec<u64> = (0..10).collect();
    run_seeds(g, &cfg, &seeds).unwrap()
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (100.0 * value - target).abs() <= tol
}

fn reproduction(
    name: &str,
    layer2: (f64, f64),
    oracle: (f64, f64),
    kcore: Option<(f64, f64)>,
) -> (Outcome, Option<Vec<SeedRun>>) {
    let ds = match benchmark(name) {
        Ok(ds) => ds,
        Err(o) => return (o, None),
    };
    let g = &ds.graph;
    let runs = benchmark_runs(g, name, Paradigm::St);
    let l2: Vec<f64> = runs
        .iter()
        .map(|r| r.layer_accuracy(g, SplitKind::Test).unwrap()[2])
        .collect();
    let or: Vec<f64> = runs
        .iter()
        .map(|r| r.oracle(g, SplitKind::Test).unwrap())
        .collect();
    let (m2, _) = mean_std(&l2);
    let (mo, _) = mean_std(&or);
    let mut ok = within(m2, layer2.0, layer2.1) && within(mo, oracle.0, oracle.1);
    let mut detail = format!(
        "layer 2 {:.2} (want {}±{}), oracle {:.2} (want {}±{})",
        100.0 * m2,
        layer2.0,
        layer2.1,
        100.0 * mo,
        oracle.0,
        oracle.1
    );
    if let Some((target, tol)) = kcore {
        let kc: Vec<f64> = runs
            .iter()
            .map(|r| {
                evaluate_policy(r, g, Metric::KCore, &[3, 5, 10])
                    .unwrap()
                    .test_accuracy
            })
            .collect();
        let (mk, _) = mean_std(&kc);
        ok &= within(mk, target, tol);
        detail.push_str(&format!(
            ", k-core policy {:.2} (want {target}±{tol})",
            100.0 * mk
        ));
    }
    (verdict(ok, detail), Some(runs))
}

fn st_beats_alm(st: Option<&[SeedRun]>) -> Outcome {
    let ds = match benchmark("cora") {
        Ok(ds) => ds,
        Err(o) => return o,
    };
    let g = &ds.graph;
    let st = st
        .map(<[SeedRun]>::to_vec)
        .unwrap_or_else(|| benchmark_runs(g, "cora", Paradigm::St));
    let alm = benchmark_runs(g, "cora", Paradigm::Alm);
    let layer_mean = |runs: &[SeedRun], l: usize| {
        mean_std(
            &runs
                .iter()
                .map(|r| r.layer_accuracy(g, SplitKind::Test).unwrap()[l])
                .collect::<Vec<_>>(),
        )
        .0
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for l in 3..=5 {
        let (s, a) = (layer_mean(&st, l), layer_mean(&alm, l));
        ok &= s > a;
        parts.push(format!("L{l} ST {:.2} vs ALM {:.2}", 100.0 * s, 100.0 * a));
    }
    verdict(ok, parts.join(", "))
}

fn peak(rows: &[SweepRow], region: &str) -> (usize, f64, f64) {
    let curve: Vec<&SweepRow> = rows.iter().filter(|r| r.region == region).collect();
    let best = curve
        .iter()
        .fold(curve[0], |b, r| if r.accuracy > b.accuracy { r } else { b });
    (best.depth, best.accuracy, curve.last().unwrap().accuracy)
}

fn synthetic_sweep() -> Outcome {
    let ds = planted(2000, 0);
    let rows = depth_sweep(&ds, 10, &sweep_config(0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.csv");
    write_sweep_csv(&rows, fs::File::create(&path).unwrap()).unwrap();
    let lines = fs::read_to_string(&path).unwrap().lines().count();
    let (dense_depth, dense_best, dense_last) = peak(&rows, "dense");
    let (sparse_depth, _, _) = peak(&rows, "sparse");
    verdict(
        dense_depth <= sparse_depth && dense_last < dense_best && lines == 1 + 11 * 2,
        format!(
            "dense peaks at depth {dense_depth} ({:.1}%, {:.1}% at 10), sparse at depth {sparse_depth}, {} CSV rows",
            100.0 * dense_best,
            100.0 * dense_last,
            lines - 1
        ),
    )
}

fn determinism() -> Outcome {
    let produce = || {
        let dir = tempfile::tempdir().unwrap();
        let ds = planted(400, 3);
        save_dataset(&ds, dir.path()).unwrap();
        let mut bytes = Vec::new();
        for f in [
            "manifest.txt",
            "features.bin",
            "edges.bin",
            "labels.bin",
            "masks.bin",
            "regions.bin",
        ] {
            bytes.extend(fs::read(dir.path().join(f)).unwrap());
        }
        let g = &ds.graph;
        let cfg = TrainConfig {
            layers: 3,
            hidden: 16,
            epochs: 30,
            dropout: 0.5,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = &run_seeds(g, &cfg, &[5]).unwrap()[0];
        let mut metrics = Vec::new();
        write_metrics_csv(&run.report.metrics, &mut metrics).unwrap();
        let sweep_cfg = TrainConfig {
            epochs: 30,
            ..sweep_config(5)
        };
        let mut sweep = Vec::new();
        write_sweep_csv(&depth_sweep(&ds, 3, &sweep_cfg).unwrap(), &mut sweep).unwrap();
        (bytes, metrics, sweep)
    };
    let a = produce();
    let b = produce();
    verdict(
        a == b,
        format!(
            "dataset {} B, metrics {} B, sweep {} B identical across runs",
            a.0.len(),
            a.1.len(),
            a.2.len()
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = false;
    let mut report = |id: u32, name: &str, o: Outcome| {
        let (tag, note) = match o.status {
            Status::Pass => ("PASS", ""),
            Status::Fail => {
                failed = true;
                ("FAIL", "")
            }
            Status::Blocked => ("FAIL", " [blocked]"),
        };
        println!("{tag} {id:>2} {name}: {}{note}", o.detail);
    };
    report(1, "gradient check", gradient_check());
    report(2, "exit-prefix equivalence", exit_prefix());
    report(3, "ST freezing", st_freezing());
    report(4, "centrality oracles", centrality_oracles());
    report(5, "oracle dominance", oracle_dominance());
    let (cora, cora_runs) = reproduction("cora", (80.73, 2.0), (89.43, 2.5), Some((81.19, 2.0)));
    report(6, "Cora reproduction", cora);
    let (citeseer, _) = reproduction("citeseer", (71.33, 2.5), (81.96, 3.0), None);
    report(7, "CiteSeer reproduction", citeseer);
    report(
        8,
        "ST beats ALM on Cora",
        st_beats_alm(cora_runs.as_deref()),
    );
    report(9, "synthetic depth sweep", synthetic_sweep());
    report(10, "determinism", determinism());
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
