//! Repeated runs over a list of seeds.
//!
//! Seeds run on the rayon pool; results come back in seed-list order, so
//! everything derived from them is independent of scheduling.

use rayon::prelude::*;

use crate::centrality::Metric;
use crate::graph::{Graph, NormAdjacency, SplitKind};
use crate::model::{forward, AdmpParams, Mode, ModelShape};
use crate::policy::{
    apply_policy, oracle_accuracy, per_layer_accuracy, tune_clusters, PolicyError, PredictionCube,
    TunedPolicy,
};
use crate::train::{train, TrainConfig, TrainError, TrainReport};

/// One trained model and its eval-mode predictions at every exit.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub params: AdmpParams,
    pub report: TrainReport,
    pub cube: PredictionCube,
}

impl SeedRun {
    pub fn layer_accuracy(&self, graph: &Graph, split: SplitKind) -> Result<Vec<f64>, PolicyError> {
        per_layer_accuracy(&self.cube, graph.labels(), graph.mask(split))
    }

    pub fn oracle(&self, graph: &Graph, split: SplitKind) -> Result<f64, PolicyError> {
        oracle_accuracy(&self.cube, graph.labels(), graph.mask(split))
    }
}

pub fn prediction_cube(
    params: &AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
) -> Result<PredictionCube, TrainError> {
    let out = forward(params, graph, adj, Mode::Eval, 0.0, 0)?;
    Ok(PredictionCube::new(out.probs).expect("forward yields at least one exit"))
}

/// Trains `cfg` once per seed (the seed overrides `cfg.seed`).
pub fn run_seed(
    graph: &Graph,
    adj: &NormAdjacency,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SeedRun, TrainError> {
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let shape = ModelShape {
        flavor: cfg.flavor,
        depth: cfg.layers,
        in_dim: graph.n_features(),
        hidden: cfg.hidden,
        n_classes: graph.n_classes(),
    };
    let mut params = AdmpParams::init(shape, seed);
    let report = train(&mut params, graph, adj, &cfg)?;
    let cube = prediction_cube(&params, graph, adj)?;
    Ok(SeedRun {
        seed,
        params,
        report,
        cube,
    })
}

pub fn run_seeds(
    graph: &Graph,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<SeedRun>, TrainError> {
    let adj = NormAdjacency::new(graph, cfg.flavor.norm_kind());
    seeds
        .par_iter()
        .map(|&seed| run_seed(graph, &adj, cfg, seed))
        .collect()
}

/// Policy tuned on validation and its test accuracy, for one seed.
#[derive(Debug, Clone)]
pub struct PolicyResult {
    pub tuned: TunedPolicy,
    pub test_accuracy: f64,
}

/// Learns a `metric` policy on validation nodes (cluster count chosen from
/// `candidates`), buckets cut over all nodes, and scores it on test nodes.
pub fn evaluate_policy(
    run: &SeedRun,
    graph: &Graph,
    metric: Metric,
    candidates: &[usize],
) -> Result<PolicyResult, PolicyError> {
    let all = vec![true; graph.n_nodes()];
    let tuned = tune_clusters(
        &run.cube,
        graph,
        metric,
        candidates,
        &all,
        graph.mask(SplitKind::Val),
    )?;
    let outcome = apply_policy(&run.cube, &tuned.policy, &tuned.buckets)?;
    let test_accuracy = outcome.accuracy(graph.labels(), graph.mask(SplitKind::Test))?;
    Ok(PolicyResult {
        tuned,
        test_accuracy,
    })
}
