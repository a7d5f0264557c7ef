//! Node centralities for the exit policy and rank-based bucketing.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::Graph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CentralityError {
    #[error("pagerank did not converge in {iterations} iterations (L1 residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("damping factor {0} is outside (0, 1)")]
    Damping(f64),
    #[error("cannot split {nodes} ranked nodes into {buckets} buckets")]
    TooManyBuckets { buckets: usize, nodes: usize },
    #[error("bucket count must be at least 1")]
    ZeroBuckets,
    #[error("node subset is empty")]
    EmptySubset,
    #[error("subset mask has length {got}, expected {expected}")]
    SubsetLength { got: usize, expected: usize },
    #[error("unknown centrality metric {0:?} (expected degree, kcore, pagerank or walk)")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Degree,
    KCore,
    PageRank,
    WalkCount2,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Degree,
        Metric::KCore,
        Metric::PageRank,
        Metric::WalkCount2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Degree => "degree",
            Metric::KCore => "kcore",
            Metric::PageRank => "pagerank",
            Metric::WalkCount2 => "walk",
        }
    }

    pub fn compute(self, graph: &Graph) -> Result<CentralityVector, CentralityError> {
        Ok(match self {
            Metric::Degree => degree(graph),
            Metric::KCore => kcore(graph),
            Metric::PageRank => pagerank(graph, PageRankParams::default())?,
            Metric::WalkCount2 => walk_count2(graph),
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = CentralityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "degree" => Ok(Metric::Degree),
            "kcore" | "k-core" | "core" => Ok(Metric::KCore),
            "pagerank" => Ok(Metric::PageRank),
            "walk" | "walkcount" | "walk-count" | "walk_count2" => Ok(Metric::WalkCount2),
            _ => Err(CentralityError::UnknownMetric(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralityVector {
    pub metric: Metric,
    pub values: Vec<f64>,
}

pub fn degree(graph: &Graph) -> CentralityVector {
    CentralityVector {
        metric: Metric::Degree,
        values: (0..graph.n_nodes())
            .map(|v| graph.degree(v) as f64)
            .collect(),
    }
}

/// Core numbers by bucket peeling (Batagelj–Zaversnik), O(n + m).
pub fn core_numbers(graph: &Graph) -> Vec<usize> {
    let n = graph.n_nodes();
    let mut deg: Vec<usize> = (0..n).map(|v| graph.degree(v)).collect();
    let max_deg = deg.iter().copied().max().unwrap_or(0);

    // Nodes sorted by current degree; bin_start[d] is the first slot of degree d.
    let mut bin_start = vec![0usize; max_deg + 2];
    for &d in &deg {
        bin_start[d + 1] += 1;
    }
    for d in 1..bin_start.len() {
        bin_start[d] += bin_start[d - 1];
    }
    let mut order = vec![0usize; n];
    let mut pos = vec![0usize; n];
    let mut fill = bin_start.clone();
    for v in 0..n {
        pos[v] = fill[deg[v]];
        order[pos[v]] = v;
        fill[deg[v]] += 1;
    }

    for i in 0..n {
        let v = order[i];
        for &u in graph.neighbors(v) {
            if deg[u] > deg[v] {
                // move u to the front of its bin, then shrink the bin
                let du = deg[u];
                let front = bin_start[du];
                let w = order[front];
                if w != u {
                    order.swap(front, pos[u]);
                    pos[w] = pos[u];
                    pos[u] = front;
                }
                bin_start[du] += 1;
                deg[u] -= 1;
            }
        }
    }
    deg
}

pub fn kcore(graph: &Graph) -> CentralityVector {
    CentralityVector {
        metric: Metric::KCore,
        values: core_numbers(graph).into_iter().map(|c| c as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankParams {
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PageRankParams {
    fn default() -> Self {
        Self {
            damping: 0.85,
            tol: 1e-10,
            max_iter: 1000,
        }
    }
}

/// Power iteration with uniform teleport. Isolated nodes spread their mass
/// uniformly over all nodes. Stops once the L1 change drops below `tol`.
pub fn pagerank(
    graph: &Graph,
    params: PageRankParams,
) -> Result<CentralityVector, CentralityError> {
    let PageRankParams {
        damping,
        tol,
        max_iter,
    } = params;
    if !(damping > 0.0 && damping < 1.0) {
        return Err(CentralityError::Damping(damping));
    }
    let n = graph.n_nodes();
    if n == 0 {
        return Ok(CentralityVector {
            metric: Metric::PageRank,
            values: Vec::new(),
        });
    }
    let nf = n as f64;
    let mut rank = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let dangling: f64 = (0..n)
            .filter(|&v| graph.degree(v) == 0)
            .map(|v| rank[v])
            .sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        for (v, slot) in next.iter_mut().enumerate() {
            let inflow: f64 = graph
                .neighbors(v)
                .iter()
                .map(|&u| rank[u] / graph.degree(u) as f64)
                .sum();
            *slot = base + damping * inflow;
        }
        residual = rank.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut rank, &mut next);
        if residual < tol {
            return Ok(CentralityVector {
                metric: Metric::PageRank,
                values: rank,
            });
        }
    }
    Err(CentralityError::NoConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Number of length-2 walks starting at each node: `Σ_{u ∈ N(v)} deg(u)`.
pub fn walk_count2(graph: &Graph) -> CentralityVector {
    let values = (0..graph.n_nodes())
        .map(|v| {
            graph
                .neighbors(v)
                .iter()
                .map(|&u| graph.degree(u))
                .sum::<usize>() as f64
        })
        .collect();
    CentralityVector {
        metric: Metric::WalkCount2,
        values,
    }
}

/// Assignment of every node to one of `n_buckets` rank buckets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketAssignment {
    pub n_buckets: usize,
    /// Global rank at which buckets `1..n_buckets` start.
    pub boundaries: Vec<usize>,
    pub bucket_of: Vec<usize>,
}

impl BucketAssignment {
    pub fn members(&self, bucket: usize) -> impl Iterator<Item = usize> + '_ {
        self.bucket_of
            .iter()
            .enumerate()
            .filter(move |(_, &b)| b == bucket)
            .map(|(v, _)| v)
    }
}

/// Node ids sorted by `(value, id)` ascending.
pub fn rank_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    order
}

/// Ranks all nodes by centrality and cuts the ranking into `n_buckets`
/// contiguous buckets holding equally many `subset` members (sizes differ by
/// at most one). Nodes outside the subset inherit the bucket of the rank
/// range they fall into, so every node gets a bucket. With an all-true subset
/// this is plain equal-size bucketing of the whole node set.
pub fn bucketize(
    cv: &CentralityVector,
    n_buckets: usize,
    subset: &[bool],
) -> Result<BucketAssignment, CentralityError> {
    let n = cv.values.len();
    if subset.len() != n {
        return Err(CentralityError::SubsetLength {
            got: subset.len(),
            expected: n,
        });
    }
    if n_buckets == 0 {
        return Err(CentralityError::ZeroBuckets);
    }
    let members = subset.iter().filter(|&&s| s).count();
    if members == 0 {
        return Err(CentralityError::EmptySubset);
    }
    if n_buckets > members {
        return Err(CentralityError::TooManyBuckets {
            buckets: n_buckets,
            nodes: members,
        });
    }

    let order = rank_order(&cv.values);
    // the k-th subset member in rank order starts bucket b when k == b*members/C
    let starts: Vec<usize> = (1..n_buckets).map(|b| b * members / n_buckets).collect();
    let mut boundaries = Vec::with_capacity(n_buckets - 1);
    let mut seen = 0usize;
    for (rank, &v) in order.iter().enumerate() {
        if subset[v] {
            if boundaries.len() < starts.len() && seen == starts[boundaries.len()] {
                boundaries.push(rank);
            }
            seen += 1;
        }
    }
    let mut bucket_of = vec![0usize; n];
    let mut bucket = 0;
    for (rank, &v) in order.iter().enumerate() {
        while bucket < boundaries.len() && rank >= boundaries[bucket] {
            bucket += 1;
        }
        bucket_of[v] = bucket;
    }
    Ok(BucketAssignment {
        n_buckets,
        boundaries,
        bucket_of,
    })
}
