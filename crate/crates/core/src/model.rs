//! Adaptive-depth message passing stack.
//!
//! For a maximum depth `L` the model emits class probabilities at every depth
//! `ℓ = 0..=L`:
//!
//! ```text
//! p⁽⁰⁾ = softmax(X · W̃⁽⁰⁾)
//! m⁽ℓ⁾ = Â · drop(h⁽ℓ⁻¹⁾)                      (GCN)
//! m⁽ℓ⁾ = (1 + εℓ) · drop(h⁽ℓ⁻¹⁾) + A · drop(h⁽ℓ⁻¹⁾)   (GIN)
//! p⁽ℓ⁾ = softmax(m⁽ℓ⁾ · W̃⁽ℓ⁾)
//! h⁽ℓ⁾ = relu(m⁽ℓ⁾ · θℓ + bℓ)                 ℓ = 1..L-1
//! ```
//!
//! with `h⁽⁰⁾ = X`. The exit at depth `ℓ` is therefore exactly the output
//! layer of an ordinary `ℓ`-layer GNN whose hidden layers are `θ1..θℓ₋₁`.
//! `h⁽ᴸ⁾` would feed no exit, so there is no `θL`.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ad::{AdError, Tape, Var};
use crate::graph::{Graph, GraphError, NormAdjacency, NormKind};
use crate::linalg;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{flavor} expects a {expected:?} operator, got {got:?}")]
    AdjacencyKind {
        flavor: Flavor,
        expected: NormKind,
        got: NormKind,
    },
    #[error("input has {got} features, model expects {expected}")]
    InputDim { got: usize, expected: usize },
    #[error("depth {layer} exceeds model depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },
    #[error("non-finite activation at layer {layer}: {source}")]
    NonFinite { layer: usize, source: AdError },
    #[error("layer {layer}: {source}")]
    Op { layer: usize, source: AdError },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl ModelError {
    fn at(layer: usize) -> impl Fn(AdError) -> ModelError {
        move |source| match source {
            AdError::NonFinite { .. } => ModelError::NonFinite { layer, source },
            other => ModelError::Op {
                layer,
                source: other,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Gcn,
    Gin,
}

impl Flavor {
    pub fn norm_kind(self) -> NormKind {
        match self {
            Flavor::Gcn => NormKind::GcnSymmetric,
            Flavor::Gin => NormKind::RawSum,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Flavor::Gcn => "gcn",
            Flavor::Gin => "gin",
        }
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Flavor::Gcn),
            "gin" => Ok(Flavor::Gin),
            other => Err(format!("unknown flavor {other:?} (expected gcn or gin)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Names one parameter tensor of an [`AdmpParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamId {
    /// Exit head W̃⁽ℓ⁾, `ℓ = 0..=L`.
    Exit(usize),
    /// Continuation weight θℓ, `ℓ = 1..L`.
    Weight(usize),
    /// Continuation bias bℓ, `ℓ = 1..L`.
    Bias(usize),
    /// GIN self weight εℓ, `ℓ = 1..=L`.
    Eps(usize),
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Exit(l) => write!(f, "exit{l}"),
            ParamId::Weight(l) => write!(f, "theta{l}"),
            ParamId::Bias(l) => write!(f, "bias{l}"),
            ParamId::Eps(l) => write!(f, "eps{l}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub frozen: bool,
}

impl Param {
    fn new(value: Array2<f64>) -> Self {
        Self {
            value,
            frozen: false,
        }
    }

    /// SHA-256 over the little-endian bytes of the values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in self.value.iter() {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub flavor: Flavor,
    pub depth: usize,
    pub in_dim: usize,
    pub hidden: usize,
    pub n_classes: usize,
}

impl ModelShape {
    /// Width of `h⁽ℓ⁾` (and of `m⁽ℓ⁺¹⁾`).
    pub fn width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.in_dim
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmpParams {
    shape: ModelShape,
    exits: Vec<Param>,
    weights: Vec<Param>,
    biases: Vec<Param>,
    eps: Vec<Param>,
}

fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..limit))
}

impl AdmpParams {
    /// Glorot-uniform weights, zero biases and `ε = 0`. Exit heads are drawn
    /// first (depth order), then continuation weights.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exits = (0..=shape.depth)
            .map(|l| {
                let width = if l == 0 {
                    shape.in_dim
                } else {
                    shape.width(l - 1)
                };
                Param::new(glorot(&mut rng, width, shape.n_classes))
            })
            .collect();
        let hidden_layers = shape.depth.saturating_sub(1);
        let weights = (1..=hidden_layers)
            .map(|l| Param::new(glorot(&mut rng, shape.width(l - 1), shape.hidden)))
            .collect();
        let biases = (1..=hidden_layers)
            .map(|_| Param::new(Array2::zeros((1, shape.hidden))))
            .collect();
        let eps = match shape.flavor {
            Flavor::Gcn => Vec::new(),
            Flavor::Gin => (1..=shape.depth)
                .map(|_| Param::new(Array2::zeros((1, 1))))
                .collect(),
        };
        AdmpParams {
            shape,
            exits,
            weights,
            biases,
            eps,
        }
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape.depth
    }

    pub fn flavor(&self) -> Flavor {
        self.shape.flavor
    }

    /// Every parameter id, in checkpoint order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in 1..self.shape.depth {
            ids.push(ParamId::Weight(l));
            ids.push(ParamId::Bias(l));
        }
        ids.extend((0..=self.shape.depth).map(ParamId::Exit));
        ids.extend((1..=self.eps.len()).map(ParamId::Eps));
        ids
    }

    pub fn get(&self, id: ParamId) -> &Param {
        match id {
            ParamId::Exit(l) => &self.exits[l],
            ParamId::Weight(l) => &self.weights[l - 1],
            ParamId::Bias(l) => &self.biases[l - 1],
            ParamId::Eps(l) => &self.eps[l - 1],
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        match id {
            ParamId::Exit(l) => &mut self.exits[l],
            ParamId::Weight(l) => &mut self.weights[l - 1],
            ParamId::Bias(l) => &mut self.biases[l - 1],
            ParamId::Eps(l) => &mut self.eps[l - 1],
        }
    }

    /// Parameters reaching the exit at `layer`: its head, the hidden layers
    /// below it and (GIN) the aggregation weights up to it.
    pub fn exit_dependencies(&self, layer: usize) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in 1..layer {
            ids.push(ParamId::Weight(l));
            ids.push(ParamId::Bias(l));
        }
        if self.shape.flavor == Flavor::Gin {
            ids.extend((1..=layer).map(ParamId::Eps));
        }
        ids.push(ParamId::Exit(layer));
        ids
    }

    /// Parameters newly introduced by the exit at `layer`: the continuation
    /// producing `h⁽ℓ⁻¹⁾`, the aggregation of layer `ℓ` and the exit head.
    pub fn stage_group(&self, layer: usize) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if layer >= 2 {
            ids.push(ParamId::Weight(layer - 1));
            ids.push(ParamId::Bias(layer - 1));
        }
        if layer >= 1 && self.shape.flavor == Flavor::Gin {
            ids.push(ParamId::Eps(layer));
        }
        ids.push(ParamId::Exit(layer));
        ids
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for id in self.ids() {
            self.get_mut(id).frozen = frozen;
        }
    }

    /// The same model cut down to depth `depth`.
    pub fn truncated(&self, depth: usize) -> Result<AdmpParams, ModelError> {
        if depth > self.shape.depth {
            return Err(ModelError::LayerOutOfRange {
                layer: depth,
                depth: self.shape.depth,
            });
        }
        let hidden_layers = depth.saturating_sub(1);
        Ok(AdmpParams {
            shape: ModelShape {
                depth,
                ..self.shape
            },
            exits: self.exits[..=depth].to_vec(),
            weights: self.weights[..hidden_layers].to_vec(),
            biases: self.biases[..hidden_layers].to_vec(),
            eps: self.eps[..self.eps.len().min(depth)].to_vec(),
        })
    }

    fn check_inputs(&self, x: &Array2<f64>, adj: &NormAdjacency) -> Result<(), ModelError> {
        let expected = self.shape.flavor.norm_kind();
        if adj.kind() != expected {
            return Err(ModelError::AdjacencyKind {
                flavor: self.shape.flavor,
                expected,
                got: adj.kind(),
            });
        }
        if x.ncols() != self.shape.in_dim {
            return Err(ModelError::InputDim {
                got: x.ncols(),
                expected: self.shape.in_dim,
            });
        }
        if x.nrows() != adj.n() {
            return Err(GraphError::DimensionMismatch {
                got: x.nrows(),
                expected: adj.n(),
            }
            .into());
        }
        Ok(())
    }
}

/// Handles into a tape holding one forward pass.
pub struct TapeForward {
    /// Log-probabilities per computed exit.
    pub logprobs: Vec<Var>,
    /// `h⁽ℓ⁾` for `ℓ = 0..` (index 0 is the input).
    pub hidden: Vec<Var>,
    /// `m⁽ℓ⁾` for `ℓ = 1..` (index 0 is the input).
    pub messages: Vec<Var>,
    /// Leaf handle of every parameter placed on the tape.
    pub params: Vec<(ParamId, Var)>,
}

/// Records a forward pass up to exit `up_to` on `tape`.
///
/// Parameters enter as leaves tracked iff `track_grads` and not frozen.
/// In training mode one dropout mask is drawn per layer `1..=up_to`, in
/// layer order, from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape<'g, R: Rng + ?Sized>(
    tape: &mut Tape<'g>,
    params: &'g AdmpParams,
    x: &'g Array2<f64>,
    adj: &'g NormAdjacency,
    up_to: usize,
    mode: Mode,
    dropout_p: f64,
    track_grads: bool,
    rng: &mut R,
) -> Result<TapeForward, ModelError> {
    params.check_inputs(x, adj)?;
    let depth = params.depth();
    if up_to > depth {
        return Err(ModelError::LayerOutOfRange {
            layer: up_to,
            depth,
        });
    }
    let mut leaves = Vec::new();
    let mut leaf = |tape: &mut Tape<'g>, id: ParamId| {
        let p = params.get(id);
        let v = tape.leaf_ref(&p.value, track_grads && !p.frozen);
        leaves.push((id, v));
        v
    };
    let training = mode == Mode::Train;

    let input = tape.leaf_ref(x, false);
    let w0 = leaf(tape, ParamId::Exit(0));
    let z0 = tape.matmul(input, w0).map_err(ModelError::at(0))?;
    let lp0 = tape.log_softmax_rows(z0).map_err(ModelError::at(0))?;

    let mut logprobs = vec![lp0];
    let mut hidden = vec![input];
    let mut messages = vec![input];
    for l in 1..=up_to {
        let err = ModelError::at(l);
        let h_prev = hidden[l - 1];
        let dropped = tape
            .dropout(h_prev, dropout_p, training, rng)
            .map_err(&err)?;
        let m = match params.flavor() {
            Flavor::Gcn => tape.spmm(adj, dropped).map_err(&err)?,
            Flavor::Gin => {
                let eps = leaf(tape, ParamId::Eps(l));
                tape.gin_aggregate(adj, dropped, eps).map_err(&err)?
            }
        };
        messages.push(m);
        let w = leaf(tape, ParamId::Exit(l));
        let z = tape.matmul(m, w).map_err(&err)?;
        logprobs.push(tape.log_softmax_rows(z).map_err(&err)?);
        if l < up_to {
            let theta = leaf(tape, ParamId::Weight(l));
            let bias = leaf(tape, ParamId::Bias(l));
            let pre = tape.matmul(m, theta).map_err(&err)?;
            let pre = tape.add_bias(pre, bias).map_err(&err)?;
            hidden.push(tape.relu(pre).map_err(&err)?);
        }
    }
    Ok(TapeForward {
        logprobs,
        hidden,
        messages,
        params: leaves,
    })
}

/// Result of a full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `h⁽ℓ⁾`, `ℓ = 0..L` (`h⁽⁰⁾ = X`).
    pub hidden: Vec<Array2<f64>>,
    /// `m⁽ℓ⁾`, `ℓ = 0..=L` (`m⁽⁰⁾ = X`).
    pub messages: Vec<Array2<f64>>,
    /// `p⁽ℓ⁾`, `ℓ = 0..=L`, each N×c.
    pub probs: Vec<Array2<f64>>,
}

pub fn forward(
    params: &AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    mode: Mode,
    dropout_p: f64,
    seed: u64,
) -> Result<ForwardOutput, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let fwd = forward_on_tape(
        &mut tape,
        params,
        graph.features(),
        adj,
        params.depth(),
        mode,
        dropout_p,
        false,
        &mut rng,
    )?;
    Ok(ForwardOutput {
        hidden: fwd.hidden.iter().map(|&v| tape.value(v).clone()).collect(),
        messages: fwd
            .messages
            .iter()
            .map(|&v| tape.value(v).clone())
            .collect(),
        probs: fwd
            .logprobs
            .iter()
            .map(|&v| tape.value(v).mapv(f64::exp))
            .collect(),
    })
}

/// Hidden layer of a conventional GNN.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardLayer {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
    /// GIN self weight of the aggregation feeding this layer.
    pub eps: Option<f64>,
}

/// A plain `depth`-layer GNN: `depth - 1` hidden layers followed by an
/// aggregate-then-linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardGnn {
    pub flavor: Flavor,
    pub depth: usize,
    pub hidden: Vec<StandardLayer>,
    pub output: Array2<f64>,
    pub output_eps: Option<f64>,
}

/// Lifts the computation behind exit `layer` out of the adaptive model.
pub fn extract_standard_gnn(params: &AdmpParams, layer: usize) -> Result<StandardGnn, ModelError> {
    if layer > params.depth() {
        return Err(ModelError::LayerOutOfRange {
            layer,
            depth: params.depth(),
        });
    }
    let eps_at = |l: usize| match params.flavor() {
        Flavor::Gin if l >= 1 => Some(params.get(ParamId::Eps(l)).value[[0, 0]]),
        _ => None,
    };
    let hidden = (1..layer)
        .map(|l| StandardLayer {
            weight: params.get(ParamId::Weight(l)).value.clone(),
            bias: params.get(ParamId::Bias(l)).value.clone(),
            eps: eps_at(l),
        })
        .collect();
    Ok(StandardGnn {
        flavor: params.flavor(),
        depth: layer,
        hidden,
        output: params.get(ParamId::Exit(layer)).value.clone(),
        output_eps: eps_at(layer),
    })
}

impl StandardGnn {
    /// Class probabilities, computed directly with dense kernels (no tape).
    /// Dropout masks are drawn with the same per-layer, row-major contract as
    /// [`forward_on_tape`].
    pub fn predict(
        &self,
        x: &Array2<f64>,
        adj: &NormAdjacency,
        mode: Mode,
        dropout_p: f64,
        seed: u64,
    ) -> Result<Array2<f64>, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let training = mode == Mode::Train && dropout_p > 0.0;
        let mut drop = |h: &Array2<f64>| -> Array2<f64> {
            if !training {
                return h.clone();
            }
            let scale = 1.0 / (1.0 - dropout_p);
            let mut out = h.clone();
            for v in out.iter_mut() {
                let keep = rng.gen::<f64>() >= dropout_p;
                *v *= if keep { scale } else { 0.0 };
            }
            out
        };
        let aggregate = |h: &Array2<f64>, eps: Option<f64>| -> Result<Array2<f64>, ModelError> {
            let mut m = adj.spmm(h)?;
            if let Some(e) = eps {
                m.zip_mut_with(h, |o, &v| *o += (1.0 + e) * v);
            }
            Ok(m)
        };

        let logits = if self.depth == 0 {
            linalg::matmul(x, &self.output)
        } else {
            let mut h = x.clone();
            for layer in &self.hidden {
                let m = aggregate(&drop(&h), layer.eps)?;
                let mut pre = linalg::matmul(&m, &layer.weight);
                pre += &layer.bias;
                h = pre.mapv(|v| v.max(0.0));
            }
            let m = aggregate(&drop(&h), self.output_eps)?;
            linalg::matmul(&m, &self.output)
        };
        Ok(linalg::log_softmax_rows(&logits).mapv(f64::exp))
    }
}

const CHECKPOINT_FORMAT: &str = "admp-checkpoint 1";

/// Writes `manifest.txt` and `params.bin` into `dir`.
///
/// `params.bin` holds every tensor in [`AdmpParams::ids`] order
/// (θ/b pairs for `ℓ = 1..L`, then W̃⁽⁰⁾..W̃⁽ᴸ⁾, then ε₁..ε_L for GIN),
/// each row-major little-endian f64.
pub fn save_checkpoint(params: &AdmpParams, seed: u64, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut layout = Vec::new();
    for id in params.ids() {
        let value = &params.get(id).value;
        layout.push(format!("{id}[{}x{}]", value.nrows(), value.ncols()));
        for v in value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("params.bin"), &blob)?;
    let shape = params.shape();
    let mut manifest = fs::File::create(dir.join("manifest.txt"))?;
    writeln!(manifest, "format = {CHECKPOINT_FORMAT}")?;
    writeln!(manifest, "endianness = little")?;
    writeln!(manifest, "flavor = {}", shape.flavor)?;
    writeln!(manifest, "depth = {}", shape.depth)?;
    writeln!(manifest, "in_dim = {}", shape.in_dim)?;
    writeln!(manifest, "hidden = {}", shape.hidden)?;
    writeln!(manifest, "n_classes = {}", shape.n_classes)?;
    writeln!(manifest, "seed = {seed}")?;
    writeln!(manifest, "layout = {}", layout.join(" "))?;
    writeln!(
        manifest,
        "file = params.bin {} {}",
        blob.len(),
        hex::encode(Sha256::digest(&blob))
    )?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`]; returns the
/// parameters (all unfrozen) and the recorded seed.
pub fn load_checkpoint(dir: &Path) -> Result<(AdmpParams, u64), ModelError> {
    let bad = |msg: String| ModelError::Checkpoint(msg);
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    let mut fields = std::collections::BTreeMap::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed manifest line {line:?}")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let field = |k: &str| {
        fields
            .get(k)
            .cloned()
            .ok_or_else(|| ModelError::Checkpoint(format!("manifest lacks {k}")))
    };
    let number = |k: &str| -> Result<u64, ModelError> {
        field(k)?
            .parse()
            .map_err(|_| ModelError::Checkpoint(format!("{k} is not an integer")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format {:?}", field("format")?)));
    }
    let shape = ModelShape {
        flavor: field("flavor")?.parse().map_err(bad)?,
        depth: number("depth")? as usize,
        in_dim: number("in_dim")? as usize,
        hidden: number("hidden")? as usize,
        n_classes: number("n_classes")? as usize,
    };
    let seed = number("seed")?;

    let blob = fs::read(dir.join("params.bin"))?;
    let file = field("file")?;
    let parts: Vec<&str> = file.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "params.bin" {
        return Err(bad(format!("malformed file entry {file:?}")));
    }
    if parts[1] != blob.len().to_string() {
        return Err(bad(format!(
            "params.bin has {} bytes, manifest says {}",
            blob.len(),
            parts[1]
        )));
    }
    if parts[2] != hex::encode(Sha256::digest(&blob)) {
        return Err(bad("params.bin checksum mismatch".into()));
    }

    let mut params = AdmpParams::init(shape, 0);
    let mut offset = 0;
    for id in params.ids() {
        let target = &mut params.get_mut(id).value;
        let len = target.len() * 8;
        let chunk = blob
            .get(offset..offset + len)
            .ok_or_else(|| bad("params.bin is shorter than the model layout".into()))?;
        for (dst, bytes) in target.iter_mut().zip(chunk.chunks_exact(8)) {
            *dst = f64::from_le_bytes(bytes.try_into().expect("8 bytes"));
        }
        offset += len;
    }
    if offset != blob.len() {
        return Err(bad("params.bin is longer than the model layout".into()));
    }
    Ok((params, seed))
}
