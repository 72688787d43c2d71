//! Metrics, the epoch loop with early stopping, masked-attribute
//! pretraining for the shared encoder and message-passing stack, and batch
//! evaluation. The same loop drives both the relational network and the
//! standalone base models through a small driver seam.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::base::{base_forward_batch, base_hook, column_indices, BaseBundle, BaseTopology};
use crate::graph::{sample_subgraph, BatchGraph, GraphError, RelGraph, SamplerConfig};
use crate::model::{
    attribute_embeds, encode_tokens, forward_batch, message_pass_layer, tuple_from_tokens,
    EncoderNs, ForwardPass, ModelBundle, ModelError,
};
use crate::profile::TaskType;
use crate::store::{DataSlice, SliceTable, SplitSets, StoreError, Value};
use crate::tensor::optim::{AdamConfig, ParamStore};
use crate::tensor::{Graph, NodeId, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config: {0}")]
    Config(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Stable sub-seed derivation so every randomized stage of a run can be
/// replayed in isolation.
pub fn derive_seed(base: u64, tag: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is wide enough"))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rank-based AUC-ROC with midranks for ties, equal to the probability a
/// positive outscores a negative (ties counting half).
pub fn auc_roc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(TrainError::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(TrainError::Metric("non-finite score".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(TrainError::Metric(format!("label {bad} is not 0/1")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::Metric("both classes required for AUC".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("checked finite"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = midrank;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 =
        labels.iter().zip(&ranks).filter(|(&y, _)| y == 1.0).map(|(_, &r)| r).sum();
    let np = n_pos as f64;
    let u = pos_rank_sum - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(TrainError::Metric(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let total: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// The task's headline metric: AUC for classification (higher is better),
/// MAE for regression (lower is better).
pub fn task_metric(task: TaskType, preds: &[f64], labels: &[f64]) -> Result<f64> {
    match task {
        TaskType::Classification => auc_roc(preds, labels),
        TaskType::Regression => mae(preds, labels),
    }
}

pub fn metric_better(task: TaskType, candidate: f64, incumbent: f64) -> bool {
    match task {
        TaskType::Classification => candidate > incumbent,
        TaskType::Regression => candidate < incumbent,
    }
}

/// Map a metric onto a "higher is better" score in (0, 1] so thresholds
/// compare uniformly across task types.
pub fn metric_as_score(task: TaskType, metric: f64) -> f64 {
    match task {
        TaskType::Classification => metric,
        TaskType::Regression => 1.0 / (1.0 + metric),
    }
}

pub const LR_GRID: [f64; 5] = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Defaults per task when unset: 10 for regression, 5 for classification.
    pub patience: Option<usize>,
    /// Validation gains below this are treated as noise.
    pub improvement_tol: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            lr: 1e-2,
            weight_decay: 0.0,
            max_epochs: 500,
            patience: None,
            improvement_tol: 1e-5,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max epochs must be positive".into()));
        }
        if self.patience == Some(0) {
            return Err(TrainError::Config("patience must be at least 1".into()));
        }
        if self.improvement_tol < 0.0 {
            return Err(TrainError::Config("improvement tolerance must be non-negative".into()));
        }
        Ok(())
    }

    pub fn patience_for(&self, task: TaskType) -> usize {
        self.patience.unwrap_or(match task {
            TaskType::Regression => 10,
            TaskType::Classification => 5,
        })
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Patience bookkeeping: tracks the best validation metric seen and decides
/// when a run has stalled.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    task: TaskType,
    patience: usize,
    tol: f64,
    pub best: Option<f64>,
    pub best_epoch: usize,
    misses: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopVerdict {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStop {
    pub fn new(task: TaskType, patience: usize, tol: f64) -> Self {
        EarlyStop { task, patience, tol, best: None, best_epoch: 0, misses: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopVerdict {
        let improved = match self.best {
            None => true,
            Some(best) => match self.task {
                TaskType::Classification => metric > best + self.tol,
                TaskType::Regression => metric < best - self.tol,
            },
        };
        if improved {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.misses = 0;
        } else {
            self.misses += 1;
        }
        StopVerdict { improved, stop: self.misses >= self.patience }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub train_loss: Vec<f64>,
    pub valid_metric: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub lr: f64,
}

pub fn epoch_json(stat: &EpochStat) -> String {
    serde_json::json!({
        "epoch": stat.epoch,
        "train_loss": stat.train_loss,
        "valid_metric": stat.valid_metric,
        "improved": stat.improved,
    })
    .to_string()
}

pub fn final_report_json(task_sig: &str, outcome: &TrainOutcome, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({
        "task_sig": task_sig,
        "best_epoch": outcome.best_epoch,
        "metric": outcome.best_metric,
        "epochs_run": outcome.epochs_run,
        "stopped_early": outcome.stopped_early,
        "config": cfg,
    })
}

/// Numeric labels per target-table row; categorical answers parse when they
/// are plain numbers, everything else reads as unlabeled.
pub fn extract_labels(table: &SliceTable, column: &str) -> Result<Vec<Option<f64>>> {
    let ci = table
        .column_index(column)
        .ok_or_else(|| TrainError::Config(format!("label column {column:?} not in table {:?}", table.name)))?;
    Ok(table
        .rows
        .iter()
        .map(|r| match &r[ci] {
            Value::Num(x) => Some(*x),
            Value::Cat(s) => s.parse().ok(),
            _ => None,
        })
        .collect())
}

/// Partition trainability for the hybrid strategy: with pretrained shared
/// weights the encoder and message-passing stack stay frozen while fusion,
/// head, wrap, and any merged base model keep learning.
pub fn apply_hybrid_freeze(store: &mut ParamStore, pretrained_supplied: bool) {
    store.set_trainable_prefix("encoder.", !pretrained_supplied);
    store.set_trainable_prefix("relmp.", !pretrained_supplied);
    store.set_trainable_prefix("fusion.", true);
    store.set_trainable_prefix("head.", true);
    store.set_trainable_prefix("wrap.", true);
    store.set_trainable_prefix("base.", true);
    store.set_trainable_prefix("pretrain.", false);
}

fn snapshot_trainable(store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    store
        .trainable_names()
        .into_iter()
        .map(|n| {
            let data = store.get(&n).expect("trainable name exists").data().to_vec();
            (n, data)
        })
        .collect()
}

fn restore_trainable(store: &mut ParamStore, snapshot: &BTreeMap<String, Vec<f64>>) {
    for (name, data) in snapshot {
        store.get_mut(name).expect("snapshot name exists").data_mut().copy_from_slice(data);
    }
}

trait Driver {
    fn step(&mut self, rows: &[usize], seed: u64) -> Result<f64>;
    fn validate(&mut self, seed: u64) -> Result<f64>;
    fn store_mut(&mut self) -> &mut ParamStore;
}

fn run_training(
    driver: &mut dyn Driver,
    train_rows: &[usize],
    task: TaskType,
    cfg: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochStat)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_rows.is_empty() {
        return Err(TrainError::Config("train split has no labeled rows".into()));
    }
    let mut stop = EarlyStop::new(task, cfg.patience_for(task), cfg.improvement_tol);
    let mut train_loss = Vec::new();
    let mut valid_metric = Vec::new();
    let mut best_snapshot = snapshot_trainable(driver.store_mut());
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let mut order = train_rows.to_vec();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", &[epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let loss = driver.step(chunk, derive_seed(cfg.seed, "batch", &[epoch as u64, bi as u64]))?;
            total += loss * chunk.len() as f64;
        }
        let epoch_loss = total / order.len() as f64;
        // A fixed evaluation seed keeps validation neighborhoods identical
        // across epochs, so the curve measures the model and not the sampler.
        let metric = driver.validate(derive_seed(cfg.seed, "eval", &[]))?;
        train_loss.push(epoch_loss);
        valid_metric.push(metric);
        let verdict = stop.observe(epoch, metric);
        if verdict.improved {
            best_snapshot = snapshot_trainable(driver.store_mut());
        }
        if let Some(cb) = on_epoch.as_mut() {
            cb(&EpochStat { epoch, train_loss: epoch_loss, valid_metric: metric, improved: verdict.improved });
        }
        if verdict.stop {
            stopped_early = true;
            break;
        }
    }
    restore_trainable(driver.store_mut(), &best_snapshot);
    Ok(TrainOutcome {
        best_epoch: stop.best_epoch,
        best_metric: stop.best.expect("at least one epoch ran"),
        epochs_run: train_loss.len(),
        train_loss,
        valid_metric,
        stopped_early,
        lr: cfg.lr,
    })
}

pub(crate) fn labeled_rows(rows: &[usize], labels: &[Option<f64>]) -> Vec<usize> {
    rows.iter().copied().filter(|&r| labels.get(r).is_some_and(Option::is_some)).collect()
}

/// One full-batch gradient step on a base model. Only trainable parameters
/// move, so freezing everything but the head turns this into a head probe.
pub fn base_step(
    bundle: &mut BaseBundle,
    table: &SliceTable,
    rows: &[usize],
    labels: &[Option<f64>],
    task: TaskType,
    adam: &AdamConfig,
) -> Result<f64> {
    let col_idx = column_indices(&bundle.topology, table)?;
    let targets: Vec<f64> = rows
        .iter()
        .map(|&r| labels[r].ok_or_else(|| TrainError::Config(format!("row {r} is unlabeled"))))
        .collect::<Result<_>>()?;
    let (loss, grads) = {
        let row_values: Vec<Vec<&Value>> = rows
            .iter()
            .map(|&r| col_idx.iter().map(|&ci| &table.rows[r][ci]).collect())
            .collect();
        let mut fp = ForwardPass::new(&bundle.store);
        let (_, pred) = base_forward_batch(&mut fp, &bundle.topology, &row_values)?;
        let loss = match task {
            TaskType::Classification => fp.tape.bce_with_logits(pred, &targets)?,
            TaskType::Regression => fp.tape.l1_loss(pred, &targets)?,
        };
        let lv = fp.tape.value(loss).data()[0];
        fp.tape.backward(loss)?;
        (lv, fp.bind.collect_grads(&fp.tape))
    };
    bundle.store.optimizer_step(&grads, adam)?;
    Ok(loss)
}

struct ModelDriver<'a> {
    bundle: &'a mut ModelBundle,
    base: Option<&'a BaseTopology>,
    slice: &'a DataSlice,
    rgraph: &'a RelGraph,
    labels: &'a [Option<f64>],
    valid_rows: Vec<usize>,
    task: TaskType,
    sampler: SamplerConfig,
    adam: AdamConfig,
}

impl ModelDriver<'_> {
    fn batch_for(&self, rows: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchGraph> {
        let target = &self.bundle.topology.target_table;
        let mut subs = Vec::with_capacity(rows.len());
        for &r in rows {
            let node = self
                .rgraph
                .node_id(target, r)
                .ok_or_else(|| TrainError::Config(format!("row {r} outside table {target:?}")))?;
            subs.push(sample_subgraph(self.rgraph, node, None, &self.sampler, rng)?);
        }
        Ok(BatchGraph::from_subgraphs(self.rgraph.relation_count(), &subs))
    }
}

impl Driver for ModelDriver<'_> {
    fn step(&mut self, rows: &[usize], seed: u64) -> Result<f64> {
        let targets: Vec<f64> = rows.iter().map(|&r| self.labels[r].expect("prefiltered")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = self.batch_for(rows, &mut rng)?;
        let (loss_val, grads) = {
            let mut hook = match self.base {
                Some(topo) => Some(base_hook(topo, self.slice.target())?),
                None => None,
            };
            let mut out = match hook.as_mut() {
                Some(h) => forward_batch(self.bundle, self.slice, self.rgraph, &batch, Some(h))?,
                None => forward_batch(self.bundle, self.slice, self.rgraph, &batch, None)?,
            };
            let loss = match self.task {
                TaskType::Classification => out.fp.tape.bce_with_logits(out.output, &targets)?,
                TaskType::Regression => out.fp.tape.l1_loss(out.output, &targets)?,
            };
            let lv = out.fp.tape.value(loss).data()[0];
            out.fp.tape.backward(loss)?;
            (lv, out.fp.bind.collect_grads(&out.fp.tape))
        };
        self.bundle.store.optimizer_step(&grads, &self.adam)?;
        Ok(loss_val)
    }

    fn validate(&mut self, seed: u64) -> Result<f64> {
        let preds = predict_rows_model(
            self.bundle,
            self.base,
            self.slice,
            self.rgraph,
            &self.valid_rows,
            &self.sampler,
            seed,
        )?;
        let ys: Vec<f64> = self.valid_rows.iter().map(|&r| self.labels[r].expect("prefiltered")).collect();
        task_metric(self.task, &preds, &ys)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.bundle.store
    }
}

const EVAL_CHUNK: usize = 256;

/// Raw head outputs for target rows: logits for classification, values for
/// regression. Deterministic in (parameters, rows, seed).
pub fn predict_rows_model(
    bundle: &ModelBundle,
    base: Option<&BaseTopology>,
    slice: &DataSlice,
    rgraph: &RelGraph,
    rows: &[usize],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let target = &bundle.topology.target_table;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut preds = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let mut subs = Vec::with_capacity(chunk.len());
        for &r in chunk {
            let node = rgraph
                .node_id(target, r)
                .ok_or_else(|| TrainError::Config(format!("row {r} outside table {target:?}")))?;
            subs.push(sample_subgraph(rgraph, node, None, sampler, &mut rng)?);
        }
        let batch = BatchGraph::from_subgraphs(rgraph.relation_count(), &subs);
        let mut hook = match base {
            Some(topo) => Some(base_hook(topo, slice.target())?),
            None => None,
        };
        let out = match hook.as_mut() {
            Some(h) => forward_batch(bundle, slice, rgraph, &batch, Some(h))?,
            None => forward_batch(bundle, slice, rgraph, &batch, None)?,
        };
        preds.extend_from_slice(out.fp.tape.value(out.output).data());
    }
    Ok(preds)
}

/// Metric over the labeled subset of `rows`, without touching parameters.
pub fn evaluate_model(
    bundle: &ModelBundle,
    base: Option<&BaseTopology>,
    slice: &DataSlice,
    rgraph: &RelGraph,
    rows: &[usize],
    labels: &[Option<f64>],
    task: TaskType,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<f64> {
    let keep = labeled_rows(rows, labels);
    if keep.is_empty() {
        return Err(TrainError::Config("no labeled rows to evaluate".into()));
    }
    let preds = predict_rows_model(bundle, base, slice, rgraph, &keep, sampler, seed)?;
    let ys: Vec<f64> = keep.iter().map(|&r| labels[r].expect("filtered")).collect();
    task_metric(task, &preds, &ys)
}

/// Train the relational network on the slice's target rows. The bundle's
/// store is updated in place and ends at the best-validation epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_task(
    bundle: &mut ModelBundle,
    base: Option<&BaseTopology>,
    slice: &DataSlice,
    rgraph: &RelGraph,
    labels: &[Option<f64>],
    splits: &SplitSets,
    task: TaskType,
    cfg: &TrainConfig,
    on_epoch: Option<&mut dyn FnMut(&EpochStat)>,
) -> Result<TrainOutcome> {
    let target_rows = slice.target().rows.len();
    if labels.len() != target_rows {
        return Err(TrainError::Config(format!(
            "{} labels for {} target rows",
            labels.len(),
            target_rows
        )));
    }
    if let Some(topo) = base {
        if !bundle.store.contains(&format!("base.{}.head.w", topo.config.id)) {
            return Err(TrainError::Config(format!(
                "base model {:?} is not merged into the parameter store",
                topo.config.id
            )));
        }
    }
    let train_rows = labeled_rows(&splits.train, labels);
    let valid_rows = labeled_rows(&splits.valid, labels);
    if valid_rows.is_empty() {
        return Err(TrainError::Config("validation split has no labeled rows".into()));
    }
    let mut driver = ModelDriver {
        bundle,
        base,
        slice,
        rgraph,
        labels,
        valid_rows,
        task,
        sampler: cfg.sampler.clone(),
        adam: cfg.adam(),
    };
    run_training(&mut driver, &train_rows, task, cfg, on_epoch)
}

/// Grid-search the learning rate, keeping the best validation metric. Ties
/// keep the earliest grid entry. The winning parameters land in `bundle`.
#[allow(clippy::too_many_arguments)]
pub fn train_task_lr_search(
    bundle: &mut ModelBundle,
    base: Option<&BaseTopology>,
    slice: &DataSlice,
    rgraph: &RelGraph,
    labels: &[Option<f64>],
    splits: &SplitSets,
    task: TaskType,
    cfg: &TrainConfig,
    grid: &[f64],
) -> Result<TrainOutcome> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty learning-rate grid".into()));
    }
    let mut best: Option<(ModelBundle, TrainOutcome)> = None;
    for &lr in grid {
        let mut candidate = bundle.clone();
        let mut run_cfg = cfg.clone();
        run_cfg.lr = lr;
        let outcome =
            train_task(&mut candidate, base, slice, rgraph, labels, splits, task, &run_cfg, None)?;
        let take = match &best {
            None => true,
            Some((_, incumbent)) => metric_better(task, outcome.best_metric, incumbent.best_metric),
        };
        if take {
            best = Some((candidate, outcome));
        }
    }
    let (winner, outcome) = best.expect("grid is nonempty");
    *bundle = winner;
    Ok(outcome)
}

struct BaseDriver<'a> {
    bundle: &'a mut BaseBundle,
    table: &'a SliceTable,
    labels: &'a [Option<f64>],
    valid_rows: Vec<usize>,
    task: TaskType,
    adam: AdamConfig,
}

impl Driver for BaseDriver<'_> {
    fn step(&mut self, rows: &[usize], _seed: u64) -> Result<f64> {
        base_step(self.bundle, self.table, rows, self.labels, self.task, &self.adam)
    }

    fn validate(&mut self, _seed: u64) -> Result<f64> {
        let preds = predict_rows_base(self.bundle, self.table, &self.valid_rows)?;
        let ys: Vec<f64> = self.valid_rows.iter().map(|&r| self.labels[r].expect("prefiltered")).collect();
        task_metric(self.task, &preds, &ys)
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.bundle.store
    }
}

pub fn predict_rows_base(bundle: &BaseBundle, table: &SliceTable, rows: &[usize]) -> Result<Vec<f64>> {
    let col_idx = column_indices(&bundle.topology, table)?;
    let mut preds = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let row_values: Vec<Vec<&Value>> = chunk
            .iter()
            .map(|&r| col_idx.iter().map(|&ci| &table.rows[r][ci]).collect())
            .collect();
        let mut fp = ForwardPass::new(&bundle.store);
        let (_, pred) = base_forward_batch(&mut fp, &bundle.topology, &row_values)?;
        preds.extend_from_slice(fp.tape.value(pred).data());
    }
    Ok(preds)
}

pub fn evaluate_base(
    bundle: &BaseBundle,
    table: &SliceTable,
    rows: &[usize],
    labels: &[Option<f64>],
    task: TaskType,
) -> Result<f64> {
    let keep = labeled_rows(rows, labels);
    if keep.is_empty() {
        return Err(TrainError::Config("no labeled rows to evaluate".into()));
    }
    let preds = predict_rows_base(bundle, table, &keep)?;
    let ys: Vec<f64> = keep.iter().map(|&r| labels[r].expect("filtered")).collect();
    task_metric(task, &preds, &ys)
}

/// Train a standalone base model on target-table rows only.
pub fn train_base(
    bundle: &mut BaseBundle,
    slice: &DataSlice,
    labels: &[Option<f64>],
    splits: &SplitSets,
    task: TaskType,
    cfg: &TrainConfig,
    on_epoch: Option<&mut dyn FnMut(&EpochStat)>,
) -> Result<TrainOutcome> {
    let table = slice.target();
    if labels.len() != table.rows.len() {
        return Err(TrainError::Config(format!(
            "{} labels for {} target rows",
            labels.len(),
            table.rows.len()
        )));
    }
    let train_rows = labeled_rows(&splits.train, labels);
    let valid_rows = labeled_rows(&splits.valid, labels);
    if valid_rows.is_empty() {
        return Err(TrainError::Config("validation split has no labeled rows".into()));
    }
    let mut driver = BaseDriver { bundle, table, labels, valid_rows, task, adam: cfg.adam() };
    run_training(&mut driver, &train_rows, task, cfg, on_epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub tuples_per_step: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            tuples_per_step: 16,
            mask_rate: 0.15,
            lr: 1e-3,
            seed: 0,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainOutcome {
    /// Loss on a fixed probe batch before any update.
    pub initial_loss: f64,
    /// Loss on the same probe batch after the last update.
    pub final_loss: f64,
    /// Per-step training losses.
    pub losses: Vec<f64>,
}

fn cosine_distance(g: &mut Graph, a: NodeId, b: NodeId) -> crate::tensor::Result<NodeId> {
    let ab = g.mul(a, b)?;
    let dot = g.sum_all(ab);
    let aa = g.mul(a, a)?;
    let a2 = g.sum_all(aa);
    let bb = g.mul(b, b)?;
    let b2 = g.sum_all(bb);
    let a2e = g.add_const(a2, 1e-12);
    let b2e = g.add_const(b2, 1e-12);
    let na = g.sqrt(a2e)?;
    let nb = g.sqrt(b2e)?;
    let denom = g.mul(na, nb)?;
    let sim = g.div_scalar(dot, denom)?;
    let neg = g.scale(sim, -1.0);
    Ok(g.add_const(neg, 1.0))
}

/// One masked-reconstruction pass over the given seed nodes. Masked
/// attribute embeddings are replaced by the learned mask token; targets are
/// detached copies of the original embeddings; reconstruction reads the
/// token's encoder output next to the node's post-message-passing state.
fn pretrain_pass(
    bundle: &ModelBundle,
    slice: &DataSlice,
    rgraph: &RelGraph,
    nodes: &[usize],
    sampler: &SamplerConfig,
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
    want_grads: bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let topo = &bundle.topology;
    let mcfg = &topo.config;
    let mut subs = Vec::with_capacity(nodes.len());
    for &n in nodes {
        subs.push(sample_subgraph(rgraph, n, None, sampler, rng)?);
    }
    let batch = BatchGraph::from_subgraphs(rgraph.relation_count(), &subs);
    let mut fp = ForwardPass::new(&bundle.store);
    let mut h_rows = Vec::with_capacity(batch.len());
    let mut masked: Vec<(usize, NodeId, NodeId)> = Vec::new();
    for (i, &global) in batch.node_global.iter().enumerate() {
        let (tname, row) = rgraph.locate(global)?;
        let table = topo
            .table(tname)
            .ok_or_else(|| ModelError::Config(format!("table {tname:?} not in model topology")))?;
        let st = slice.table(tname)?;
        let values: Vec<&Value> = table
            .columns
            .iter()
            .map(|c| {
                st.column_index(&c.name)
                    .map(|ci| &st.rows[row][ci])
                    .ok_or_else(|| ModelError::Config(format!("column {}.{} missing from slice", tname, c.name)))
            })
            .collect::<std::result::Result<_, _>>()?;
        let ns = EncoderNs::encoder(tname);
        let mut embeds = attribute_embeds(&mut fp, mcfg, &ns, &table.columns, &values)?;
        let mask_js: Vec<usize> =
            (0..embeds.len()).filter(|_| rng.random::<f64>() < mask_rate).collect();
        let mut targets = Vec::with_capacity(mask_js.len());
        for &j in &mask_js {
            targets.push(fp.tape.detach(embeds[j]));
        }
        if !mask_js.is_empty() {
            let mask_token = fp.param("pretrain.mask")?;
            for &j in &mask_js {
                embeds[j] = mask_token;
            }
        }
        let cls = fp.param(&format!("encoder.table.{tname}.cls"))?;
        let tokens = encode_tokens(&mut fp, mcfg, &embeds, cls)?;
        for (&j, &target) in mask_js.iter().zip(&targets) {
            let tok = fp.tape.gather_rows(tokens, &[j + 1])?;
            masked.push((i, tok, target));
        }
        h_rows.push(tuple_from_tokens(&mut fp, tname, embeds.len(), tokens)?);
    }
    let mut h = fp.tape.concat_rows(&h_rows)?;
    for l in 0..mcfg.mp_layers {
        h = message_pass_layer(&mut fp, mcfg, l, &batch.adj, h)?;
    }
    if masked.is_empty() {
        return Ok((0.0, BTreeMap::new()));
    }
    let rw = fp.param("pretrain.recon.w")?;
    let rb = fp.param("pretrain.recon.b")?;
    let mut acc: Option<NodeId> = None;
    for &(i, tok, target) in &masked {
        let state = fp.tape.gather_rows(h, &[i])?;
        let joined = fp.tape.concat_cols(&[tok, state])?;
        let recon_w = fp.tape.matmul(joined, rw)?;
        let recon = fp.tape.add_row(recon_w, rb)?;
        let li = cosine_distance(&mut fp.tape, recon, target)?;
        acc = Some(match acc {
            Some(a) => fp.tape.add(a, li)?,
            None => li,
        });
    }
    let loss = fp.tape.scale(acc.expect("masked is nonempty"), 1.0 / masked.len() as f64);
    let lv = fp.tape.value(loss).data()[0];
    let grads = if want_grads {
        fp.tape.backward(loss)?;
        fp.bind.collect_grads(&fp.tape)
    } else {
        BTreeMap::new()
    };
    Ok((lv, grads))
}

fn sample_nodes(rng: &mut ChaCha8Rng, node_count: usize, amount: usize) -> Vec<usize> {
    let k = amount.min(node_count);
    rand::seq::index::sample(rng, node_count, k).into_vec()
}

/// Self-supervised pretraining of the shared encoder and message-passing
/// stack over one or more slices. Probe losses bracket the run on a fixed
/// batch so improvement is measured apples to apples.
pub fn pretrain_shared(
    bundle: &mut ModelBundle,
    corpus: &[(&DataSlice, &RelGraph)],
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if corpus.is_empty() {
        return Err(TrainError::Config("pretraining corpus is empty".into()));
    }
    if cfg.tuples_per_step == 0 {
        return Err(TrainError::Config("tuples_per_step must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.mask_rate) {
        return Err(TrainError::Config(format!("mask rate {} outside [0, 1]", cfg.mask_rate)));
    }
    if cfg.lr <= 0.0 {
        return Err(TrainError::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    for (i, (_, rg)) in corpus.iter().enumerate() {
        let labels: Vec<String> = rg.relations.iter().map(|r| r.label()).collect();
        if labels != bundle.topology.relations {
            return Err(TrainError::Config(format!(
                "corpus graph {i} relations {labels:?} differ from model relations {:?}",
                bundle.topology.relations
            )));
        }
    }
    let (probe_slice, probe_graph) = corpus[0];
    let probe_nodes = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "probe", &[]));
        sample_nodes(&mut rng, probe_graph.node_count(), cfg.tuples_per_step)
    };
    let probe = |bundle: &ModelBundle| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "probe-pass", &[]));
        let (loss, _) = pretrain_pass(
            bundle,
            probe_slice,
            probe_graph,
            &probe_nodes,
            &cfg.sampler,
            cfg.mask_rate,
            &mut rng,
            false,
        )?;
        Ok(loss)
    };
    let initial_loss = probe(bundle)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "pretrain", &[]));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (slice, rg) = corpus[step % corpus.len()];
        let nodes = sample_nodes(&mut rng, rg.node_count(), cfg.tuples_per_step);
        let (loss, grads) =
            pretrain_pass(bundle, slice, rg, &nodes, &cfg.sampler, cfg.mask_rate, &mut rng, true)?;
        if !grads.is_empty() {
            bundle.store.optimizer_step(&grads, &adam)?;
        }
        losses.push(loss);
    }
    let final_loss = probe(bundle)?;
    Ok(PretrainOutcome { initial_loss, final_loss, losses })
}
