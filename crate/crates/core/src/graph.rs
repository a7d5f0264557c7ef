//! Immutable node-classification graph and the sparse propagation operators
//! used by message passing.
//!
//! Adjacency is stored row-compressed and symmetric: every undirected edge
//! appears in both endpoint rows, neighbor lists are sorted ascending and
//! contain neither duplicates nor self-loops.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("edge ({u}, {v}) references a node outside 0..{n}")]
    NodeOutOfRange { u: usize, v: usize, n: usize },
    #[error("node {node} appears in more than one of the train/val/test masks")]
    MaskOverlap { node: usize },
    #[error("label {label} of node {node} is outside 0..{n_classes}")]
    LabelOutOfRange {
        node: usize,
        label: usize,
        n_classes: usize,
    },
    #[error("feature ({row}, {col}) is not finite")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("graph has no feature columns")]
    EmptyFeatures,
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("operand has {got} rows, operator expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
}

/// Train/validation/test membership, one flag per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl Split {
    pub fn empty(n: usize) -> Self {
        Self {
            train: vec![false; n],
            val: vec![false; n],
            test: vec![false; n],
        }
    }

    pub fn mask(&self, which: SplitKind) -> &[bool] {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }
}

/// What `build_graph` silently repaired in its edge input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildReport {
    pub self_loops_dropped: usize,
    pub duplicates_merged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_edges: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
    split: Split,
}

impl Graph {
    /// Builds a validated graph from an undirected edge list.
    ///
    /// Self-loops are dropped and repeated pairs (in either orientation) are
    /// merged; both are counted in the returned report.
    pub fn build(
        edges: &[(usize, usize)],
        features: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
        split: Split,
    ) -> Result<(Graph, BuildReport), GraphError> {
        let n = features.nrows();
        if features.ncols() == 0 {
            return Err(GraphError::EmptyFeatures);
        }
        if labels.len() != n {
            return Err(GraphError::LengthMismatch {
                what: "labels",
                got: labels.len(),
                expected: n,
            });
        }
        for (what, mask) in [
            ("train mask", &split.train),
            ("val mask", &split.val),
            ("test mask", &split.test),
        ] {
            if mask.len() != n {
                return Err(GraphError::LengthMismatch {
                    what,
                    got: mask.len(),
                    expected: n,
                });
            }
        }
        for node in 0..n {
            let hits = split.train[node] as u8 + split.val[node] as u8 + split.test[node] as u8;
            if hits > 1 {
                return Err(GraphError::MaskOverlap { node });
            }
        }
        for (node, &label) in labels.iter().enumerate() {
            if label >= n_classes {
                return Err(GraphError::LabelOutOfRange {
                    node,
                    label,
                    n_classes,
                });
            }
        }
        for ((row, col), value) in features.indexed_iter() {
            if !value.is_finite() {
                return Err(GraphError::NonFiniteFeature { row, col });
            }
        }

        let mut report = BuildReport::default();
        let mut pairs = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(GraphError::NodeOutOfRange { u, v, n });
            }
            if u == v {
                report.self_loops_dropped += 1;
                continue;
            }
            pairs.push((u.min(v), u.max(v)));
        }
        let before = pairs.len();
        pairs.sort_unstable();
        pairs.dedup();
        report.duplicates_merged = before - pairs.len();
        if report.self_loops_dropped > 0 {
            log::warn!(
                "dropped {} self-loop(s) from edge input",
                report.self_loops_dropped
            );
        }

        let mut degree = vec![0usize; n];
        for &(u, v) in &pairs {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        for d in &degree {
            indptr.push(indptr.last().unwrap() + d);
        }
        let mut cursor = indptr[..n].to_vec();
        let mut indices = vec![0usize; indptr[n]];
        for &(u, v) in &pairs {
            indices[cursor[u]] = v;
            cursor[u] += 1;
            indices[cursor[v]] = u;
            cursor[v] += 1;
        }
        for node in 0..n {
            indices[indptr[node]..indptr[node + 1]].sort_unstable();
        }

        let graph = Graph {
            n_edges: pairs.len(),
            indptr,
            indices,
            features,
            labels,
            n_classes,
            split,
        };
        Ok((graph, report))
    }

    pub fn n_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of unique undirected edges.
    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.indices[self.indptr[node]..self.indptr[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.indptr[node + 1] - self.indptr[node]
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> &Split {
        &self.split
    }

    pub fn mask(&self, which: SplitKind) -> &[bool] {
        self.split.mask(which)
    }

    /// Undirected edges as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes()).flat_map(move |u| {
            self.neighbors(u)
                .iter()
                .copied()
                .filter(move |&v| u < v)
                .map(move |v| (u, v))
        })
    }

    /// Returns the same graph with node `v` renamed to `perm[v]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Graph, GraphError> {
        let n = self.n_nodes();
        if perm.len() != n {
            return Err(GraphError::LengthMismatch {
                what: "permutation",
                got: perm.len(),
                expected: n,
            });
        }
        let edges: Vec<_> = self.edges().map(|(u, v)| (perm[u], perm[v])).collect();
        let mut features = Array2::zeros(self.features.raw_dim());
        let mut labels = vec![0; n];
        let mut split = Split::empty(n);
        for v in 0..n {
            features.row_mut(perm[v]).assign(&self.features.row(v));
            labels[perm[v]] = self.labels[v];
            split.train[perm[v]] = self.split.train[v];
            split.val[perm[v]] = self.split.val[v];
            split.test[perm[v]] = self.split.test[v];
        }
        Graph::build(&edges, features, labels, self.n_classes, split).map(|(g, _)| g)
    }

    /// Replaces the train/val/test split, keeping everything else.
    pub fn with_split(&self, split: Split) -> Result<Graph, GraphError> {
        let edges: Vec<_> = self.edges().collect();
        Graph::build(
            &edges,
            self.features.clone(),
            self.labels.clone(),
            self.n_classes,
            split,
        )
        .map(|(g, _)| g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// `D̃^{-1/2}(A + I)D̃^{-1/2}` with `D̃` the degree of `A + I`.
    GcnSymmetric,
    /// Plain adjacency `A`, no self entries.
    RawSum,
}

/// Sparse N×N propagation operator in row-compressed form.
#[derive(Debug, Clone, PartialEq)]
pub struct NormAdjacency {
    kind: NormKind,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl NormAdjacency {
    pub fn new(graph: &Graph, kind: NormKind) -> Self {
        let n = graph.n_nodes();
        let mut indptr = Vec::with_capacity(n + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        match kind {
            NormKind::GcnSymmetric => {
                let weight = |u: usize, v: usize| {
                    1.0 / (((graph.degree(u) + 1) * (graph.degree(v) + 1)) as f64).sqrt()
                };
                for u in 0..n {
                    let mut self_done = false;
                    for &v in graph.neighbors(u) {
                        if !self_done && v > u {
                            indices.push(u);
                            values.push(weight(u, u));
                            self_done = true;
                        }
                        indices.push(v);
                        values.push(weight(u, v));
                    }
                    if !self_done {
                        indices.push(u);
                        values.push(weight(u, u));
                    }
                    indptr.push(indices.len());
                }
            }
            NormKind::RawSum => {
                for u in 0..n {
                    for &v in graph.neighbors(u) {
                        indices.push(v);
                        values.push(1.0);
                    }
                    indptr.push(indices.len());
                }
            }
        }
        NormAdjacency {
            kind,
            indptr,
            indices,
            values,
        }
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[r]..self.indptr[r + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.n();
        let mut dense = Array2::zeros((n, n));
        for r in 0..n {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                dense[[r, c]] = v;
            }
        }
        dense
    }

    /// Sparse × dense product. Each output row accumulates its terms in
    /// ascending column order, so the result is bit-reproducible.
    pub fn spmm(&self, x: &Array2<f64>) -> Result<Array2<f64>, GraphError> {
        let n = self.n();
        if x.nrows() != n {
            return Err(GraphError::DimensionMismatch {
                got: x.nrows(),
                expected: n,
            });
        }
        let k = x.ncols();
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * k];
        for (r, dst) in out.chunks_exact_mut(k.max(1)).enumerate().take(n) {
            let (cols, vals) = self.row(r);
            for (&c, &a) in cols.iter().zip(vals) {
                let xr = &src[c * k..(c + 1) * k];
                for (d, &s) in dst.iter_mut().zip(xr) {
                    *d += a * s;
                }
            }
        }
        Ok(Array2::from_shape_vec((n, k), out).expect("shape"))
    }
}
