//! Exit selection.
//!
//! Nodes are ranked by a centrality metric and cut into `C` equal-count
//! buckets; each bucket exits at the layer with the best validation accuracy
//! on its members. The oracle picks, per node, any layer that is right and
//! bounds what a policy can reach.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::centrality::{bucketize, rank_order, BucketAssignment, CentralityError, Metric};
use crate::graph::Graph;
use crate::linalg::argmax;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("mask selects no nodes")]
    EmptyMask,
    #[error("length mismatch: {what} has {got}, expected {expected}")]
    Length {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("policy has {got} exit layers for {expected} buckets")]
    Buckets { got: usize, expected: usize },
    #[error("exit layer {layer} exceeds model depth {depth}")]
    Layer { layer: usize, depth: usize },
    #[error("no candidate cluster count fits the mask")]
    NoCandidate,
    #[error("malformed policy file: {0}")]
    Parse(String),
    #[error(transparent)]
    Centrality(#[from] CentralityError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Class probabilities of every node at every exit.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCube {
    probs: Vec<Array2<f64>>,
    preds: Vec<Vec<usize>>,
}

impl PredictionCube {
    /// `probs[ℓ]` is N×c for exits `ℓ = 0..=L`.
    pub fn new(probs: Vec<Array2<f64>>) -> Result<Self, PolicyError> {
        let (n, c) = probs.first().map(|p| p.dim()).ok_or(PolicyError::Length {
            what: "probs",
            got: 0,
            expected: 1,
        })?;
        for p in &probs {
            if p.dim() != (n, c) {
                return Err(PolicyError::Length {
                    what: "probs layer",
                    got: p.nrows(),
                    expected: n,
                });
            }
        }
        let preds = probs
            .iter()
            .map(|p| {
                p.rows()
                    .into_iter()
                    .map(|r| argmax(r.iter().copied()))
                    .collect()
            })
            .collect();
        Ok(Self { probs, preds })
    }

    pub fn n_nodes(&self) -> usize {
        self.preds[0].len()
    }

    pub fn n_layers(&self) -> usize {
        self.preds.len()
    }

    pub fn depth(&self) -> usize {
        self.preds.len() - 1
    }

    pub fn probs(&self, layer: usize) -> &Array2<f64> {
        &self.probs[layer]
    }

    pub fn predictions(&self, layer: usize) -> &[usize] {
        &self.preds[layer]
    }

    fn check(&self, labels: &[usize], mask: &[bool]) -> Result<usize, PolicyError> {
        let n = self.n_nodes();
        for (what, got) in [("labels", labels.len()), ("mask", mask.len())] {
            if got != n {
                return Err(PolicyError::Length {
                    what,
                    got,
                    expected: n,
                });
            }
        }
        match mask.iter().filter(|&&m| m).count() {
            0 => Err(PolicyError::EmptyMask),
            k => Ok(k),
        }
    }
}

/// Accuracy of each exit on the masked nodes.
pub fn per_layer_accuracy(
    cube: &PredictionCube,
    labels: &[usize],
    mask: &[bool],
) -> Result<Vec<f64>, PolicyError> {
    let count = cube.check(labels, mask)?;
    Ok((0..cube.n_layers())
        .map(|l| {
            let hits = (0..cube.n_nodes())
                .filter(|&v| mask[v] && cube.preds[l][v] == labels[v])
                .count();
            hits as f64 / count as f64
        })
        .collect())
}

/// Fraction of masked nodes that at least one exit classifies correctly.
pub fn oracle_accuracy(
    cube: &PredictionCube,
    labels: &[usize],
    mask: &[bool],
) -> Result<f64, PolicyError> {
    let count = cube.check(labels, mask)?;
    let hits = (0..cube.n_nodes())
        .filter(|&v| mask[v] && cube.preds.iter().any(|p| p[v] == labels[v]))
        .count();
    Ok(hits as f64 / count as f64)
}

/// Accuracy of every exit within every bucket; `None` for buckets with no
/// masked members.
pub fn bucket_layer_accuracy(
    cube: &PredictionCube,
    labels: &[usize],
    mask: &[bool],
    buckets: &BucketAssignment,
) -> Result<Vec<Vec<Option<f64>>>, PolicyError> {
    cube.check(labels, mask)?;
    if buckets.bucket_of.len() != cube.n_nodes() {
        return Err(PolicyError::Length {
            what: "bucket assignment",
            got: buckets.bucket_of.len(),
            expected: cube.n_nodes(),
        });
    }
    let mut hits = vec![vec![0usize; cube.n_layers()]; buckets.n_buckets];
    let mut counts = vec![0usize; buckets.n_buckets];
    for v in (0..cube.n_nodes()).filter(|&v| mask[v]) {
        let b = buckets.bucket_of[v];
        counts[b] += 1;
        for (l, p) in cube.preds.iter().enumerate() {
            if p[v] == labels[v] {
                hits[b][l] += 1;
            }
        }
    }
    Ok(hits
        .into_iter()
        .zip(counts)
        .map(|(h, c)| {
            h.into_iter()
                .map(|k| (c > 0).then(|| k as f64 / c as f64))
                .collect()
        })
        .collect())
}

/// Bucket-to-exit map.
#[derive(Debug, Clone, PartialEq)]
pub struct ExitPolicy {
    pub metric: Metric,
    pub n_buckets: usize,
    /// Rank positions (ascending centrality) where buckets `1..C` start.
    pub boundaries: Vec<usize>,
    pub exit_layers: Vec<usize>,
}

const POLICY_FORMAT: &str = "admp-policy 1";

impl ExitPolicy {
    /// Bucket of every node of `graph`, recomputing the metric.
    pub fn assign(&self, graph: &Graph) -> Result<BucketAssignment, PolicyError> {
        let cv = self.metric.compute(graph)?;
        let order = rank_order(&cv.values);
        let mut bucket_of = vec![0; order.len()];
        let mut bucket = 0;
        for (rank, &v) in order.iter().enumerate() {
            while bucket < self.boundaries.len() && rank >= self.boundaries[bucket] {
                bucket += 1;
            }
            bucket_of[v] = bucket;
        }
        Ok(BucketAssignment {
            n_buckets: self.n_buckets,
            boundaries: self.boundaries.clone(),
            bucket_of,
        })
    }

    pub fn to_text(&self) -> String {
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        writeln!(s, "format = {POLICY_FORMAT}").unwrap();
        writeln!(s, "metric = {}", self.metric).unwrap();
        writeln!(s, "clusters = {}", self.n_buckets).unwrap();
        writeln!(s, "boundaries = {}", join(&self.boundaries)).unwrap();
        writeln!(s, "exit_layers = {}", join(&self.exit_layers)).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self, PolicyError> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PolicyError::Parse(format!("no '=' in {line:?}")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| PolicyError::Parse(format!("missing {k}")))
        };
        if get("format")? != POLICY_FORMAT {
            return Err(PolicyError::Parse(format!(
                "unsupported format {:?}",
                get("format")?
            )));
        }
        let list = |k: &str| -> Result<Vec<usize>, PolicyError> {
            get(k)?
                .split_whitespace()
                .map(|x| {
                    x.parse()
                        .map_err(|_| PolicyError::Parse(format!("bad {k} entry {x:?}")))
                })
                .collect()
        };
        let metric = get("metric")?
            .parse()
            .map_err(|e: CentralityError| PolicyError::Parse(e.to_string()))?;
        let n_buckets: usize = get("clusters")?
            .parse()
            .map_err(|_| PolicyError::Parse("bad clusters".into()))?;
        let policy = Self {
            metric,
            n_buckets,
            boundaries: list("boundaries")?,
            exit_layers: list("exit_layers")?,
        };
        if policy.exit_layers.len() != n_buckets || policy.boundaries.len() + 1 != n_buckets {
            return Err(PolicyError::Buckets {
                got: policy.exit_layers.len(),
                expected: n_buckets,
            });
        }
        Ok(policy)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Picks each bucket's exit from validation labels only. Ties go to the
/// shallower exit; buckets without validation nodes use the exit that is
/// best on the whole validation set.
pub fn learn_policy(
    cube: &PredictionCube,
    labels: &[usize],
    val_mask: &[bool],
    buckets: &BucketAssignment,
    metric: Metric,
) -> Result<ExitPolicy, PolicyError> {
    let global = per_layer_accuracy(cube, labels, val_mask)?;
    let fallback = argmax(global.iter().copied());
    let table = bucket_layer_accuracy(cube, labels, val_mask, buckets)?;
    let exit_layers = table
        .iter()
        .map(|row| {
            if row.iter().all(Option::is_none) {
                fallback
            } else {
                argmax(row.iter().map(|a| a.unwrap_or(f64::NEG_INFINITY)))
            }
        })
        .collect();
    Ok(ExitPolicy {
        metric,
        n_buckets: buckets.n_buckets,
        boundaries: buckets.boundaries.clone(),
        exit_layers,
    })
}

/// Per-node exit choice and the prediction made there.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutcome {
    pub exit_layer: Vec<usize>,
    pub predictions: Vec<usize>,
}

impl PolicyOutcome {
    pub fn accuracy(&self, labels: &[usize], mask: &[bool]) -> Result<f64, PolicyError> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(PolicyError::EmptyMask);
        }
        let hits = (0..labels.len())
            .filter(|&v| mask[v] && self.predictions[v] == labels[v])
            .count();
        Ok(hits as f64 / count as f64)
    }
}

pub fn apply_policy(
    cube: &PredictionCube,
    policy: &ExitPolicy,
    buckets: &BucketAssignment,
) -> Result<PolicyOutcome, PolicyError> {
    if policy.exit_layers.len() != buckets.n_buckets {
        return Err(PolicyError::Buckets {
            got: policy.exit_layers.len(),
            expected: buckets.n_buckets,
        });
    }
    if let Some(&layer) = policy.exit_layers.iter().find(|&&l| l > cube.depth()) {
        return Err(PolicyError::Layer {
            layer,
            depth: cube.depth(),
        });
    }
    if buckets.bucket_of.len() != cube.n_nodes() {
        return Err(PolicyError::Length {
            what: "bucket assignment",
            got: buckets.bucket_of.len(),
            expected: cube.n_nodes(),
        });
    }
    let exit_layer: Vec<usize> = buckets
        .bucket_of
        .iter()
        .map(|&b| policy.exit_layers[b])
        .collect();
    let predictions = exit_layer
        .iter()
        .enumerate()
        .map(|(v, &l)| cube.preds[l][v])
        .collect();
    Ok(PolicyOutcome {
        exit_layer,
        predictions,
    })
}

/// `node,bucket,exit_layer,predicted,true` for every masked node.
pub fn write_exit_trace<W: std::io::Write>(
    outcome: &PolicyOutcome,
    buckets: &BucketAssignment,
    labels: &[usize],
    mask: &[bool],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "node,bucket,exit_layer,predicted,true")?;
    for v in (0..labels.len()).filter(|&v| mask[v]) {
        writeln!(
            out,
            "{v},{},{},{},{}",
            buckets.bucket_of[v], outcome.exit_layer[v], outcome.predictions[v], labels[v]
        )?;
    }
    Ok(())
}

/// A policy learned for one cluster count, with its validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedPolicy {
    pub policy: ExitPolicy,
    pub buckets: BucketAssignment,
    pub val_accuracy: f64,
}

/// Learns a policy for every candidate `C` and keeps the one with the best
/// validation accuracy (earliest candidate on ties). Buckets are cut over
/// `bucket_subset`, typically every node.
pub fn tune_clusters(
    cube: &PredictionCube,
    graph: &Graph,
    metric: Metric,
    candidates: &[usize],
    bucket_subset: &[bool],
    val_mask: &[bool],
) -> Result<TunedPolicy, PolicyError> {
    let cv = metric.compute(graph)?;
    let mut best: Option<TunedPolicy> = None;
    for &c in candidates {
        let buckets = match bucketize(&cv, c, bucket_subset) {
            Ok(b) => b,
            Err(CentralityError::TooManyBuckets { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let policy = learn_policy(cube, graph.labels(), val_mask, &buckets, metric)?;
        let val_accuracy =
            apply_policy(cube, &policy, &buckets)?.accuracy(graph.labels(), val_mask)?;
        if best.as_ref().is_none_or(|b| val_accuracy > b.val_accuracy) {
            best = Some(TunedPolicy {
                policy,
                buckets,
                val_accuracy,
            });
        }
    }
    best.ok_or(PolicyError::NoCandidate)
}
