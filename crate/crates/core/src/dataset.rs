//! On-disk dataset container, the sparse/dense merged-graph builder and the
//! per-region depth sweep.
//!
//! A dataset directory holds `manifest.txt` (`key = value` lines) plus
//! little-endian payloads:
//!
//! | file          | contents                                              |
//! |---------------|-------------------------------------------------------|
//! | `features.bin`| N×d f64, row-major                                    |
//! | `edges.bin`   | u32 pairs `(u, v)`, `u < v`, one per undirected edge  |
//! | `labels.bin`  | u16 per node                                          |
//! | `masks.bin`   | u8 per node, bit 0 train, bit 1 val, bit 2 test       |
//! | `regions.bin` | optional, u8 region index per node                    |
//!
//! Each payload has a `file = <name> <bytes> <sha256>` manifest line.
//! Unknown manifest keys are kept and ignored.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::centrality::core_numbers;
use crate::graph::{Graph, GraphError, NormAdjacency, Split, SplitKind};
use crate::model::{forward, AdmpParams, Flavor, Mode, ModelShape};
use crate::policy::{per_layer_accuracy, PredictionCube};
use crate::train::{train_single_task, TrainConfig, TrainError};

pub const DATASET_FORMAT: &str = "admp-dataset 1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{file}: checksum mismatch")]
    Checksum { file: String },
    #[error("{file}: {got} bytes, expected {expected}")]
    Size {
        file: String,
        got: usize,
        expected: usize,
    },
    #[error("{0}")]
    Dimension(String),
    #[error("infeasible synthetic spec: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Named node partition, e.g. the sparse and dense halves of a merged graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Regions {
    pub names: Vec<String>,
    pub of_node: Vec<u8>,
}

impl Regions {
    pub fn mask(&self, region: usize) -> Vec<bool> {
        self.of_node.iter().map(|&r| r as usize == region).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub regions: Option<Regions>,
    /// Manifest keys this crate does not interpret (converter notes etc.).
    pub extra: BTreeMap<String, String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, graph: Graph) -> Self {
        Self {
            name: name.into(),
            graph,
            regions: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub regions: Vec<String>,
    pub files: Vec<FileEntry>,
    pub extra: BTreeMap<String, String>,
}

const RESERVED: [&str; 9] = [
    "format",
    "name",
    "endianness",
    "n_nodes",
    "n_edges",
    "n_features",
    "n_classes",
    "regions",
    "file",
];

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: &str| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        };
        line("format", DATASET_FORMAT);
        line("name", &self.name);
        line("endianness", "little");
        line("n_nodes", &self.n_nodes.to_string());
        line("n_edges", &self.n_edges.to_string());
        line("n_features", &self.n_features.to_string());
        line("n_classes", &self.n_classes.to_string());
        if !self.regions.is_empty() {
            line("regions", &self.regions.join(" "));
        }
        for (k, v) in &self.extra {
            line(k, v);
        }
        for f in &self.files {
            line("file", &format!("{} {} {}", f.name, f.bytes, f.sha256));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let bad = |m: String| DataError::Manifest(m);
        let mut fields = BTreeMap::new();
        let mut files = Vec::new();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("no '=' in {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "file" {
                let parts: Vec<&str> = v.split_whitespace().collect();
                let [name, bytes, sha] = parts[..] else {
                    return Err(bad(format!("file entry {v:?} needs name, bytes, sha256")));
                };
                files.push(FileEntry {
                    name: name.to_string(),
                    bytes: bytes
                        .parse()
                        .map_err(|_| bad(format!("bad byte count {bytes:?}")))?,
                    sha256: sha.to_ascii_lowercase(),
                });
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| DataError::Manifest(format!("missing {k}")))
        };
        let count = |k: &str| -> Result<usize, DataError> {
            get(k)?
                .parse()
                .map_err(|_| DataError::Manifest(format!("bad {k}")))
        };
        if get("format")? != DATASET_FORMAT {
            return Err(bad(format!("unsupported format {:?}", get("format")?)));
        }
        if let Some(e) = fields.get("endianness") {
            if e != "little" {
                return Err(bad(format!("unsupported endianness {e:?}")));
            }
        }
        Ok(Self {
            name: fields.get("name").cloned().unwrap_or_default(),
            n_nodes: count("n_nodes")?,
            n_edges: count("n_edges")?,
            n_features: count("n_features")?,
            n_classes: count("n_classes")?,
            regions: fields
                .get("regions")
                .map(|r| r.split_whitespace().map(String::from).collect())
                .unwrap_or_default(),
            extra: fields
                .into_iter()
                .filter(|(k, _)| !RESERVED.contains(&k.as_str()))
                .collect(),
            files,
        })
    }

    pub fn file(&self, name: &str) -> Option<&FileEntry> {
        self.files.iter().find(|f| f.name == name)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes the container; returns the manifest it wrote.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest, DataError> {
    let g = &ds.graph;
    if g.n_features() == 0 {
        return Err(GraphError::EmptyFeatures.into());
    }
    if g.n_nodes() > u32::MAX as usize || g.n_classes() > u16::MAX as usize + 1 {
        return Err(DataError::Dimension(
            "graph too large for the container".into(),
        ));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut payloads: Vec<(&str, Vec<u8>)> = Vec::new();
    let mut features = Vec::with_capacity(g.n_nodes() * g.n_features() * 8);
    for v in g.features().iter() {
        features.extend_from_slice(&v.to_le_bytes());
    }
    payloads.push(("features.bin", features));
    let mut edges = Vec::with_capacity(g.n_edges() * 8);
    for (u, v) in g.edges() {
        edges.extend_from_slice(&(u as u32).to_le_bytes());
        edges.extend_from_slice(&(v as u32).to_le_bytes());
    }
    payloads.push(("edges.bin", edges));
    let labels = g
        .labels()
        .iter()
        .flat_map(|&l| (l as u16).to_le_bytes())
        .collect();
    payloads.push(("labels.bin", labels));
    let split = g.split();
    let masks = (0..g.n_nodes())
        .map(|v| {
            u8::from(split.train[v]) | u8::from(split.val[v]) << 1 | u8::from(split.test[v]) << 2
        })
        .collect();
    payloads.push(("masks.bin", masks));
    if let Some(r) = &ds.regions {
        payloads.push(("regions.bin", r.of_node.clone()));
    }

    let mut files = Vec::new();
    for (name, bytes) in payloads {
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        files.push(FileEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DatasetManifest {
        name: ds.name.clone(),
        n_nodes: g.n_nodes(),
        n_edges: g.n_edges(),
        n_features: g.n_features(),
        n_classes: g.n_classes(),
        regions: ds
            .regions
            .as_ref()
            .map(|r| r.names.clone())
            .unwrap_or_default(),
        files,
        extra: ds.extra.clone(),
    };
    let path = dir.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(manifest)
}

fn read_payload(
    dir: &Path,
    manifest: &DatasetManifest,
    name: &str,
    expected: usize,
) -> Result<Vec<u8>, DataError> {
    let entry = manifest
        .file(name)
        .ok_or_else(|| DataError::Manifest(format!("no entry for {name}")))?;
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    if bytes.len() != entry.bytes {
        return Err(DataError::Size {
            file: name.into(),
            got: bytes.len(),
            expected: entry.bytes,
        });
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(DataError::Checksum { file: name.into() });
    }
    if bytes.len() != expected {
        return Err(DataError::Dimension(format!(
            "{name} has {} bytes but the manifest counts imply {expected}",
            bytes.len()
        )));
    }
    Ok(bytes)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let path = dir.join("manifest.txt");
    let manifest = DatasetManifest::parse(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    let (n, d) = (manifest.n_nodes, manifest.n_features);
    if d == 0 {
        return Err(GraphError::EmptyFeatures.into());
    }

    let raw = read_payload(dir, &manifest, "features.bin", n * d * 8)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let features = Array2::from_shape_vec((n, d), values).expect("size checked");

    let raw = read_payload(dir, &manifest, "edges.bin", manifest.n_edges * 8)?;
    let ids: Vec<usize> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let edges: Vec<(usize, usize)> = ids.chunks_exact(2).map(|p| (p[0], p[1])).collect();

    let raw = read_payload(dir, &manifest, "labels.bin", n * 2)?;
    let labels = raw
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as usize)
        .collect();

    let raw = read_payload(dir, &manifest, "masks.bin", n)?;
    if let Some(b) = raw.iter().find(|&&b| b > 7) {
        return Err(DataError::Dimension(format!(
            "masks.bin has unknown flag bits {b:#x}"
        )));
    }
    let split = Split {
        train: raw.iter().map(|b| b & 1 != 0).collect(),
        val: raw.iter().map(|b| b & 2 != 0).collect(),
        test: raw.iter().map(|b| b & 4 != 0).collect(),
    };

    let (graph, report) = Graph::build(&edges, features, labels, manifest.n_classes, split)?;
    if graph.n_edges() != manifest.n_edges
        || report.duplicates_merged > 0
        || report.self_loops_dropped > 0
    {
        return Err(DataError::Dimension(format!(
            "edges.bin holds {} unique edges, manifest says {}",
            graph.n_edges(),
            manifest.n_edges
        )));
    }

    let regions = match manifest.file("regions.bin") {
        None => None,
        Some(_) => {
            let of_node = read_payload(dir, &manifest, "regions.bin", n)?;
            if let Some(&r) = of_node
                .iter()
                .find(|&&r| r as usize >= manifest.regions.len())
            {
                return Err(DataError::Dimension(format!(
                    "region index {r} but only {} region names",
                    manifest.regions.len()
                )));
            }
            Some(Regions {
                names: manifest.regions.clone(),
                of_node,
            })
        }
    };
    Ok(Dataset {
        name: manifest.name.clone(),
        graph,
        regions,
        extra: manifest.extra,
    })
}

/// Fractions of each (region, label) cell assigned to train and val; the
/// rest is test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_total: usize,
    /// Core number at or above which a node is dense; `None` uses the median
    /// core number of the source.
    pub threshold: Option<usize>,
    pub seed: u64,
    pub split: SplitFractions,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_total: 5000,
            threshold: None,
            seed: 0,
            split: SplitFractions::default(),
        }
    }
}

pub const SPARSE: u8 = 0;
pub const DENSE: u8 = 1;

/// Upper median of the core numbers.
pub fn median_core(cores: &[usize]) -> usize {
    let mut sorted = cores.to_vec();
    sorted.sort_unstable();
    sorted[sorted.len() / 2]
}

/// Labels present at least `floor(n_total / (2k))` times in both pools,
/// where `k` is the size of the kept set itself (iterated to a fixed point).
pub fn label_whitelist(
    labels: &[usize],
    dense: &[bool],
    n_classes: usize,
    n_total: usize,
) -> Vec<usize> {
    let mut counts = vec![[0usize; 2]; n_classes];
    for (v, &l) in labels.iter().enumerate() {
        counts[l][usize::from(dense[v])] += 1;
    }
    let mut kept: Vec<usize> = (0..n_classes)
        .filter(|&l| counts[l][0] > 0 && counts[l][1] > 0)
        .collect();
    loop {
        if kept.is_empty() {
            return kept;
        }
        let quota = n_total / (2 * kept.len());
        let next: Vec<usize> = kept
            .iter()
            .copied()
            .filter(|&l| counts[l][0] >= quota && counts[l][1] >= quota)
            .collect();
        if next.len() == kept.len() {
            return kept;
        }
        kept = next;
    }
}

/// Merges a sparse and a dense induced subgraph of `source` (split by core
/// number) into one graph with no cross edges and identical label
/// histograms. Sparse nodes come first.
pub fn build_synthetic(source: &Graph, spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    let half = spec.n_total / 2;
    if half == 0 {
        return Err(DataError::Infeasible("n_total must be at least 2".into()));
    }
    let cores = core_numbers(source);
    let threshold = spec.threshold.unwrap_or_else(|| median_core(&cores));
    let dense: Vec<bool> = cores.iter().map(|&c| c >= threshold).collect();
    let n_dense = dense.iter().filter(|&&d| d).count();
    if n_dense == 0 || n_dense == dense.len() {
        return Err(DataError::Infeasible(format!(
            "threshold {threshold} puts {n_dense} of {} nodes in the dense pool",
            dense.len()
        )));
    }

    let kept = label_whitelist(source.labels(), &dense, source.n_classes(), spec.n_total);
    if kept.is_empty() {
        return Err(DataError::Infeasible(
            "no label is common enough in both pools".into(),
        ));
    }
    let k = kept.len();
    let mut pools = vec![[Vec::new(), Vec::new()]; k];
    let compact: BTreeMap<usize, usize> = kept.iter().enumerate().map(|(i, &l)| (l, i)).collect();
    for (v, &l) in source.labels().iter().enumerate() {
        if let Some(&i) = compact.get(&l) {
            pools[i][usize::from(dense[v])].push(v);
        }
    }
    // equal quotas; the remainder goes one each to the lowest labels that can
    // afford it in both pools
    let mut quota = vec![half / k; k];
    let mut extra = half % k;
    for (i, q) in quota.iter_mut().enumerate() {
        if extra == 0 {
            break;
        }
        if pools[i][0].len() > *q && pools[i][1].len() > *q {
            *q += 1;
            extra -= 1;
        }
    }
    if extra > 0
        || quota
            .iter()
            .zip(&pools)
            .any(|(&q, p)| p[0].len() < q || p[1].len() < q)
    {
        return Err(DataError::Infeasible(format!(
            "cannot draw {half} nodes per region over {k} labels"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut chosen: [Vec<(usize, usize)>; 2] = Default::default();
    for region in [SPARSE, DENSE] {
        let r = region as usize;
        for (i, pool) in pools.iter_mut().enumerate() {
            let p = &mut pool[r];
            p.shuffle(&mut rng);
            chosen[r].extend(p[..quota[i]].iter().map(|&v| (v, i)));
        }
        chosen[r].sort_unstable();
    }

    let n = 2 * half;
    let mut new_id = vec![usize::MAX; source.n_nodes()];
    let mut features = Array2::zeros((n, source.n_features()));
    let mut labels = Vec::with_capacity(n);
    let mut of_node = Vec::with_capacity(n);
    for (r, picks) in chosen.iter().enumerate() {
        for &(v, label) in picks {
            new_id[v] = labels.len();
            features
                .row_mut(labels.len())
                .assign(&source.features().row(v));
            labels.push(label);
            of_node.push(r as u8);
        }
    }
    let edges: Vec<(usize, usize)> = source
        .edges()
        .filter(|&(u, v)| {
            new_id[u] != usize::MAX && new_id[v] != usize::MAX && dense[u] == dense[v]
        })
        .map(|(u, v)| (new_id[u], new_id[v]))
        .collect();

    let split = stratified_split(&labels, &of_node, spec.split, &mut rng);
    let (graph, _) = Graph::build(&edges, features, labels, k, split)?;
    let mut ds = Dataset::new("synthetic", graph);
    ds.regions = Some(Regions {
        names: vec!["sparse".into(), "dense".into()],
        of_node,
    });
    ds.extra.insert("threshold".into(), threshold.to_string());
    ds.extra.insert("seed".into(), spec.seed.to_string());
    ds.extra.insert(
        "kept_labels".into(),
        kept.iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(" "),
    );
    Ok(ds)
}

/// Seeded split stratified by (region, label).
pub fn stratified_split(
    labels: &[usize],
    regions: &[u8],
    fractions: SplitFractions,
    rng: &mut ChaCha8Rng,
) -> Split {
    let n = labels.len();
    let mut cells: BTreeMap<(u8, usize), Vec<usize>> = BTreeMap::new();
    for v in 0..n {
        cells.entry((regions[v], labels[v])).or_default().push(v);
    }
    let mut split = Split::empty(n);
    for members in cells.values_mut() {
        members.shuffle(rng);
        let m = members.len();
        let n_train = (fractions.train * m as f64).round() as usize;
        let n_val = ((fractions.val * m as f64).round() as usize).min(m - n_train.min(m));
        for (i, &v) in members.iter().enumerate() {
            if i < n_train {
                split.train[v] = true;
            } else if i < n_train + n_val {
                split.val[v] = true;
            } else {
                split.test[v] = true;
            }
        }
    }
    split
}

/// Parameters of the planted two-regime source graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedSpec {
    pub n_dense: usize,
    pub n_sparse: usize,
    pub n_classes: usize,
    pub n_features: usize,
    /// Mean degree of the dense block.
    pub dense_degree: f64,
    /// Probability that a dense edge joins two nodes of the same class.
    pub dense_homophily: f64,
    /// Probability that a sparse node attaches to a node of its own class.
    pub sparse_homophily: f64,
    /// Scale of the class centroids against unit feature noise.
    pub signal: f64,
    pub seed: u64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            n_dense: 3000,
            n_sparse: 3000,
            n_classes: 4,
            n_features: 32,
            dense_degree: 20.0,
            dense_homophily: 0.7,
            sparse_homophily: 0.9,
            signal: 0.35,
            seed: 0,
        }
    }
}

/// A source graph with a high-degree, moderately homophilous block and a
/// forest of random recursive trees (core number 1). Features are Gaussian
/// noise around class centroids.
pub fn planted_source(spec: &PlantedSpec) -> Result<Graph, DataError> {
    let c = spec.n_classes;
    if c == 0 || spec.n_features == 0 || spec.n_dense < 2 || spec.n_sparse < 2 {
        return Err(DataError::Infeasible(
            "planted source needs classes, features and two nodes per block".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_dense + spec.n_sparse;
    let labels: Vec<usize> = (0..n).map(|v| v % c).collect();
    let mut edges = Vec::new();

    let by_class: Vec<Vec<usize>> = (0..c)
        .map(|k| (0..spec.n_dense).filter(|v| v % c == k).collect())
        .collect();
    let per_node = (spec.dense_degree / 2.0).round() as usize;
    for v in 0..spec.n_dense {
        for _ in 0..per_node {
            let u = if rng.gen::<f64>() < spec.dense_homophily {
                *by_class[labels[v]].choose(&mut rng).unwrap()
            } else {
                rng.gen_range(0..spec.n_dense)
            };
            if u != v {
                edges.push((u, v));
            }
        }
    }

    let base = spec.n_dense;
    let mut seen: Vec<Vec<usize>> = vec![Vec::new(); c];
    for i in 0..spec.n_sparse {
        let v = base + i;
        let own = &seen[labels[v]];
        if i > 0 {
            let u = if !own.is_empty() && rng.gen::<f64>() < spec.sparse_homophily {
                *own.choose(&mut rng).unwrap()
            } else {
                base + rng.gen_range(0..i)
            };
            edges.push((u, v));
        }
        seen[labels[v]].push(v);
    }

    let centroids: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..spec.n_features)
                .map(|_| spec.signal * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let mut features = Array2::zeros((n, spec.n_features));
    for v in 0..n {
        for (j, x) in features.row_mut(v).iter_mut().enumerate() {
            *x = centroids[labels[v]][j] + rng.sample::<f64, _>(StandardNormal);
        }
    }
    let (graph, _) = Graph::build(&edges, features, labels, c, Split::empty(n))?;
    Ok(graph)
}

/// Test accuracy of a standalone `depth`-layer network restricted to one
/// region.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub depth: usize,
    pub region: String,
    pub split: SplitKind,
    pub accuracy: f64,
}

/// Trains one conventional network per depth `0..=max_depth` on the whole
/// graph and scores each region's test nodes separately.
pub fn depth_sweep(
    ds: &Dataset,
    max_depth: usize,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>, DataError> {
    let regions = ds
        .regions
        .as_ref()
        .ok_or_else(|| DataError::Dimension("dataset has no region masks".into()))?;
    let g = &ds.graph;
    let adj = NormAdjacency::new(g, cfg.flavor.norm_kind());
    let test = g.mask(SplitKind::Test);
    let region_masks: Vec<Vec<bool>> = (0..regions.names.len())
        .map(|r| {
            regions
                .mask(r)
                .iter()
                .zip(test)
                .map(|(&a, &b)| a && b)
                .collect()
        })
        .collect();

    let per_depth: Vec<Result<Vec<SweepRow>, DataError>> = (0..=max_depth)
        .into_par_iter()
        .map(|depth| {
            let shape = ModelShape {
                flavor: cfg.flavor,
                depth,
                in_dim: g.n_features(),
                hidden: cfg.hidden,
                n_classes: g.n_classes(),
            };
            let mut params = AdmpParams::init(shape, cfg.seed);
            train_single_task(&mut params, g, &adj, cfg, depth)?;
            let out = forward(&params, g, &adj, Mode::Eval, 0.0, 0).map_err(TrainError::from)?;
            let cube = PredictionCube::new(vec![out.probs[depth].clone()]).expect("one layer");
            let mut rows = Vec::new();
            for (r, mask) in region_masks.iter().enumerate() {
                let accuracy = per_layer_accuracy(&cube, g.labels(), mask)
                    .map(|a| a[0])
                    .unwrap_or(f64::NAN);
                rows.push(SweepRow {
                    depth,
                    region: regions.names[r].clone(),
                    split: SplitKind::Test,
                    accuracy,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::new();
    for r in per_depth {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> io::Result<()> {
    writeln!(out, "depth,region,split,accuracy")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.depth,
            r.region,
            r.split.name(),
            r.accuracy
        )?;
    }
    Ok(())
}

/// GCN settings the sweep uses unless told otherwise.
pub fn sweep_config(seed: u64) -> TrainConfig {
    TrainConfig {
        flavor: Flavor::Gcn,
        hidden: 32,
        epochs: 200,
        patience: 50,
        dropout: 0.5,
        seed,
        ..TrainConfig::default()
    }
}
