//! Training paradigms.
//!
//! * **ALM** minimizes the sum of the per-exit cross-entropies in one run.
//! * **ST** trains one exit at a time: stage `t` fits the parameters newly
//!   introduced by exit `t` on that exit's loss alone, then freezes them.
//! * **Single-task** fits one exit (and everything below it) on its own loss,
//!   which is an ordinary fixed-depth GNN; the depth sweep uses it.
//!
//! All three share [`run_stage`]: full-batch Adam steps, an eval pass after
//! every step, and early stopping on validation accuracy that restores the
//! best-epoch weights of the group being trained.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, Tape};
use crate::graph::{Graph, NormAdjacency, SplitKind};
use crate::linalg::argmax;
use crate::model::{forward_on_tape, AdmpParams, Flavor, Mode, ModelError, ParamId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at stage {stage}, epoch {epoch}: {detail}")]
    Diverged {
        stage: usize,
        epoch: usize,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Alm,
    St,
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Paradigm::Alm => "alm",
            Paradigm::St => "st",
        })
    }
}

impl FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "alm" => Ok(Paradigm::Alm),
            "st" => Ok(Paradigm::St),
            other => Err(format!("unknown paradigm {other:?} (expected alm or st)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub flavor: Flavor,
    /// Maximum depth `L`.
    pub layers: usize,
    pub hidden: usize,
    /// Epoch budget per stage (ST) or in total (ALM).
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::St,
            flavor: Flavor::Gcn,
            layers: 5,
            hidden: 64,
            epochs: 200,
            lr: 0.01,
            dropout: 0.5,
            weight_decay: 0.0,
            patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Tuned hidden size, learning rate and dropout for the benchmark
    /// datasets; `None` for unknown names.
    pub fn preset(dataset: &str) -> Option<Self> {
        let (hidden, lr, dropout) = match dataset.to_ascii_lowercase().as_str() {
            "cora" => (64, 0.01, 0.8),
            "citeseer" => (64, 0.01, 0.4),
            "pubmed" => (64, 0.01, 0.2),
            "cs" => (512, 0.01, 0.4),
            "genius" => (512, 0.01, 0.2),
            "ogbn-arxiv" | "arxiv" => (512, 0.01, 0.5),
            _ => return None,
        };
        Some(Self {
            hidden,
            lr,
            dropout,
            ..Self::default()
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        if self.hidden == 0 {
            return Err(TrainError::Config("hidden must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment estimates of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: u32,
}

impl Moments {
    pub fn zeros(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update (L2 weight decay folded into the
/// gradient). Returns false and touches nothing if `frozen`.
pub fn adam_update(
    value: &mut Array2<f64>,
    frozen: bool,
    grad: &Array2<f64>,
    state: &mut Moments,
    cfg: &AdamConfig,
) -> bool {
    if frozen {
        return false;
    }
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    ndarray::Zip::from(&mut *value)
        .and(grad)
        .and(&mut state.m)
        .and(&mut state.v)
        .for_each(|w, &g, m, v| {
            let g = g + cfg.weight_decay * *w;
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        });
    true
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    state: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut AdmpParams, grads: &[(ParamId, Array2<f64>)]) {
        for (id, grad) in grads {
            let param = params.get_mut(*id);
            let state = self
                .state
                .entry(*id)
                .or_insert_with(|| Moments::zeros(param.value.dim()));
            adam_update(&mut param.value, param.frozen, grad, state, &self.cfg);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Patience-based early stopping on a score that should increase.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(f64, usize)>,
    since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        match self.best {
            Some((best, _)) if score <= best => {
                self.since_best += 1;
                if self.patience > 0 && self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((score, epoch));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(_, e)| e)
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best.map(|(s, _)| s)
    }
}

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub stage: usize,
    pub epoch: usize,
    pub layer: usize,
    pub split: SplitKind,
    pub accuracy: f64,
    pub loss: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> io::Result<()> {
    writeln!(out, "stage,epoch,layer,split,accuracy,loss")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.stage,
            r.epoch,
            r.layer,
            r.split.name(),
            r.accuracy,
            r.loss
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub trained: Vec<ParamId>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
    /// Validation accuracy of each objective exit at the best epoch.
    pub best_val_accuracy: Vec<(usize, f64)>,
    pub frozen_before: BTreeMap<ParamId, String>,
    pub frozen_after: BTreeMap<ParamId, String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageLedger {
    pub stages: Vec<StageRecord>,
}

impl StageLedger {
    /// Checks that no frozen parameter changed within its stage, and that a
    /// group, once trained and frozen, keeps its checksum in every later
    /// stage.
    pub fn verify_freezing(&self) -> Result<(), String> {
        let mut trained: Vec<ParamId> = Vec::new();
        let mut pinned: BTreeMap<ParamId, String> = BTreeMap::new();
        for record in &self.stages {
            for (id, sum) in &record.frozen_before {
                if record.frozen_after.get(id) != Some(sum) {
                    return Err(format!("{id} changed during stage {}", record.stage));
                }
                if !trained.contains(id) {
                    continue;
                }
                match pinned.get(id) {
                    Some(prev) if prev != sum => {
                        return Err(format!("{id} changed before stage {}", record.stage));
                    }
                    Some(_) => {}
                    None => {
                        pinned.insert(*id, sum.clone());
                    }
                }
            }
            trained.extend(&record.trained);
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(
            out,
            "stage,epochs_run,best_epoch,final_train_loss,layer,best_val_accuracy,trained"
        )?;
        for r in &self.stages {
            let trained: Vec<String> = r.trained.iter().map(|id| id.to_string()).collect();
            for (layer, acc) in &r.best_val_accuracy {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    r.stage,
                    r.epochs_run,
                    r.best_epoch,
                    r.final_train_loss,
                    layer,
                    acc,
                    trained.join(" ")
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub ledger: StageLedger,
    pub metrics: Vec<MetricRow>,
}

/// Per-exit accuracy and mean cross-entropy on each split, eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// `accuracy[split][layer]`, splits in [`SplitKind::ALL`] order.
    pub accuracy: [Vec<f64>; 3],
    pub loss: [Vec<f64>; 3],
}

impl Evaluation {
    pub fn accuracy(&self, split: SplitKind, layer: usize) -> f64 {
        self.accuracy[split as usize][layer]
    }

    pub fn loss(&self, split: SplitKind, layer: usize) -> f64 {
        self.loss[split as usize][layer]
    }
}

/// Eval-mode scores of exits `0..=up_to`. Empty splits score NaN.
pub fn evaluate(
    params: &AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    up_to: usize,
) -> Result<Evaluation, ModelError> {
    let mut tape = Tape::new();
    let mut no_rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = forward_on_tape(
        &mut tape,
        params,
        graph.features(),
        adj,
        up_to,
        Mode::Eval,
        0.0,
        false,
        &mut no_rng,
    )?;
    let labels = graph.labels();
    let mut accuracy: [Vec<f64>; 3] = Default::default();
    let mut loss: [Vec<f64>; 3] = Default::default();
    for split in SplitKind::ALL {
        let mask = graph.mask(split);
        let count = mask.iter().filter(|&&m| m).count();
        for &lp in &fwd.logprobs {
            let lp = tape.value(lp);
            let (mut hits, mut nll) = (0usize, 0.0);
            for (v, row) in lp.rows().into_iter().enumerate() {
                if !mask[v] {
                    continue;
                }
                if argmax(row.iter().copied()) == labels[v] {
                    hits += 1;
                }
                nll -= row[labels[v]];
            }
            accuracy[split as usize].push(hits as f64 / count as f64);
            loss[split as usize].push(nll / count as f64);
        }
    }
    Ok(Evaluation { accuracy, loss })
}

/// What one optimization stage trains and how it is scored.
#[derive(Debug, Clone)]
pub struct StageSpec {
    pub stage: usize,
    pub trainable: Vec<ParamId>,
    /// Exits whose training losses are summed.
    pub objective: Vec<usize>,
    /// Exits whose mean validation accuracy drives early stopping.
    pub monitor: Vec<usize>,
}

fn frozen_checksums(params: &AdmpParams) -> BTreeMap<ParamId, String> {
    params
        .ids()
        .into_iter()
        .filter(|&id| params.get(id).frozen)
        .map(|id| (id, params.get(id).checksum()))
        .collect()
}

pub type Gradients = Vec<(ParamId, Array2<f64>)>;

/// Sum of the training-set cross-entropies of the `objective` exits, and
/// its gradient with respect to every unfrozen parameter.
pub fn loss_and_gradients<R: rand::Rng + ?Sized>(
    params: &AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    objective: &[usize],
    mode: Mode,
    dropout: f64,
    rng: &mut R,
) -> Result<(f64, Gradients), TrainError> {
    let up_to = objective
        .iter()
        .copied()
        .max()
        .ok_or_else(|| TrainError::Config("empty objective".into()))?;
    let mut tape = Tape::new();
    let fwd = forward_on_tape(
        &mut tape,
        params,
        graph.features(),
        adj,
        up_to,
        mode,
        dropout,
        true,
        rng,
    )?;
    let train = graph.mask(SplitKind::Train);
    let mut total = tape.masked_ce_mean(fwd.logprobs[objective[0]], graph.labels(), train)?;
    for &layer in &objective[1..] {
        let ce = tape.masked_ce_mean(fwd.logprobs[layer], graph.labels(), train)?;
        total = tape.add(total, ce)?;
    }
    let value = tape.value(total)[[0, 0]];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    tape.backward(total)?;
    let mut grads = Vec::new();
    for (id, var) in &fwd.params {
        if let Some(g) = tape.take_grad(*var) {
            grads.push((*id, g));
        }
    }
    Ok((value, grads))
}

/// Runs one optimization stage. Everything outside `spec.trainable` is
/// frozen for its duration; the trainable group ends at its best-epoch
/// weights.
pub fn run_stage(
    params: &mut AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    cfg: &TrainConfig,
    spec: &StageSpec,
    rng: &mut ChaCha8Rng,
    metrics: &mut Vec<MetricRow>,
) -> Result<StageRecord, TrainError> {
    for id in params.ids() {
        params.get_mut(id).frozen = !spec.trainable.contains(&id);
    }
    let frozen_before = frozen_checksums(params);
    let up_to = spec
        .objective
        .iter()
        .chain(&spec.monitor)
        .copied()
        .max()
        .unwrap_or(0);
    let diverged = |epoch: usize, detail: String| TrainError::Diverged {
        stage: spec.stage,
        epoch,
        detail,
    };

    let mut adam = Adam::new(cfg.adam());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let snapshot = |p: &AdmpParams| -> Vec<Array2<f64>> {
        spec.trainable
            .iter()
            .map(|&id| p.get(id).value.clone())
            .collect()
    };
    let mut best = snapshot(params);
    let mut best_val = Vec::new();
    let mut train_loss_at_best = f64::NAN;
    let mut epochs_run = 0;

    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let (value, grads) = loss_and_gradients(
            params,
            graph,
            adj,
            &spec.objective,
            Mode::Train,
            cfg.dropout,
            rng,
        )
        .map_err(|e| match e {
            TrainError::Model(ModelError::NonFinite { .. }) => diverged(epoch, e.to_string()),
            other => other,
        })?;
        if !value.is_finite() {
            return Err(diverged(epoch, format!("loss is {value}")));
        }
        adam.step(params, &grads);

        let eval =
            evaluate(params, graph, adj, up_to).map_err(|e| diverged(epoch, e.to_string()))?;
        for &layer in &spec.monitor {
            for split in SplitKind::ALL {
                metrics.push(MetricRow {
                    stage: spec.stage,
                    epoch,
                    layer,
                    split,
                    accuracy: eval.accuracy(split, layer),
                    loss: eval.loss(split, layer),
                });
            }
        }
        let score = spec
            .monitor
            .iter()
            .map(|&l| eval.accuracy(SplitKind::Val, l))
            .sum::<f64>()
            / spec.monitor.len() as f64;
        match stopper.observe(epoch, score) {
            StopDecision::Improved => {
                best = snapshot(params);
                best_val = spec
                    .objective
                    .iter()
                    .map(|&l| (l, eval.accuracy(SplitKind::Val, l)))
                    .collect();
                train_loss_at_best = spec
                    .objective
                    .iter()
                    .map(|&l| eval.loss(SplitKind::Train, l))
                    .sum();
            }
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    for (id, value) in spec.trainable.iter().zip(best) {
        params.get_mut(*id).value = value;
    }
    let frozen_after = frozen_checksums(params)
        .into_iter()
        .filter(|(id, _)| frozen_before.contains_key(id))
        .collect();
    Ok(StageRecord {
        stage: spec.stage,
        trained: spec.trainable.clone(),
        epochs_run,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        final_train_loss: train_loss_at_best,
        best_val_accuracy: best_val,
        frozen_before,
        frozen_after,
    })
}

/// Dropout stream for a run; independent of the initialization stream.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn check_graph(cfg: &TrainConfig, graph: &Graph) -> Result<(), TrainError> {
    cfg.validate()?;
    for split in [SplitKind::Train, SplitKind::Val] {
        if !graph.mask(split).iter().any(|&m| m) {
            return Err(TrainError::Config(format!(
                "{} split is empty",
                split.name()
            )));
        }
    }
    Ok(())
}

/// Joint training on the sum of every exit's loss. Parameters end unfrozen.
pub fn train_alm(
    params: &mut AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    check_graph(cfg, graph)?;
    let mut rng = dropout_rng(cfg.seed);
    let mut report = TrainReport::default();
    let layers: Vec<usize> = (0..=params.depth()).collect();
    let spec = StageSpec {
        stage: 0,
        trainable: params.ids(),
        objective: layers.clone(),
        monitor: layers,
    };
    let record = run_stage(
        params,
        graph,
        adj,
        cfg,
        &spec,
        &mut rng,
        &mut report.metrics,
    )?;
    report.ledger.stages.push(record);
    params.set_all_frozen(false);
    Ok(report)
}

/// Layer-by-layer training with freezing. Parameters end frozen.
pub fn train_st(
    params: &mut AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    check_graph(cfg, graph)?;
    let mut rng = dropout_rng(cfg.seed);
    let mut report = TrainReport::default();
    for t in 0..=params.depth() {
        let spec = StageSpec {
            stage: t,
            trainable: params.stage_group(t),
            objective: vec![t],
            monitor: vec![t],
        };
        let record = run_stage(
            params,
            graph,
            adj,
            cfg,
            &spec,
            &mut rng,
            &mut report.metrics,
        )?;
        report.ledger.stages.push(record);
    }
    params.set_all_frozen(true);
    Ok(report)
}

/// Trains exit `layer` and everything beneath it on that exit's loss only:
/// an ordinary `layer`-deep GNN.
pub fn train_single_task(
    params: &mut AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    cfg: &TrainConfig,
    layer: usize,
) -> Result<TrainReport, TrainError> {
    check_graph(cfg, graph)?;
    if layer > params.depth() {
        return Err(ModelError::LayerOutOfRange {
            layer,
            depth: params.depth(),
        }
        .into());
    }
    let mut rng = dropout_rng(cfg.seed);
    let mut report = TrainReport::default();
    let spec = StageSpec {
        stage: 0,
        trainable: params.exit_dependencies(layer),
        objective: vec![layer],
        monitor: vec![layer],
    };
    let record = run_stage(
        params,
        graph,
        adj,
        cfg,
        &spec,
        &mut rng,
        &mut report.metrics,
    )?;
    report.ledger.stages.push(record);
    params.set_all_frozen(false);
    Ok(report)
}

pub fn train(
    params: &mut AdmpParams,
    graph: &Graph,
    adj: &NormAdjacency,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    match cfg.paradigm {
        Paradigm::Alm => train_alm(params, graph, adj, cfg),
        Paradigm::St => train_st(params, graph, adj, cfg),
    }
}
