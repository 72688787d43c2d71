//! Tabular base models over the target table: plain deep nets and residual
//! MLPs behind one interface that yields both a representation vector and a
//! standalone prediction. A disk-backed pool keeps trained checkpoints
//! addressable by id for the dispatcher and for wrapping.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    self, attribute_embeds, column_param_specs, column_topos, init_params, shared_encoder_specs,
    BaseAttach, ColTopo, EncoderNs, ForwardPass, Init, ModelConfig, ModelError, ParamSpec,
};
use crate::profile::TaskType;
use crate::store::{ColumnKind, DataSlice, SliceTable, Value};
use crate::tensor::checkpoint::{load_into_store, save_checkpoint, CheckpointManifest, FORMAT_VERSION};
use crate::tensor::nn::linear;
use crate::tensor::optim::ParamStore;
use crate::tensor::{NodeId, TensorError};

#[derive(Debug, Error)]
pub enum BaseError {
    #[error("base pool: {0}")]
    Registry(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("pool io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BaseError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Dnn,
    ResnetMlp,
}

impl BaseKind {
    pub fn name(&self) -> &'static str {
        match self {
            BaseKind::Dnn => "dnn",
            BaseKind::ResnetMlp => "resnet_mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub id: String,
    pub kind: BaseKind,
    /// Attribute embedding width.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Hidden width; also the representation width.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Hidden layers for dnn, residual blocks for resnet_mlp.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_buckets")]
    pub text_buckets: usize,
    #[serde(default = "default_base_year")]
    pub time_base_year: f64,
    #[serde(default = "default_abs_scale")]
    pub time_abs_scale: f64,
}

fn default_dim() -> usize {
    128
}
fn default_width() -> usize {
    128
}
fn default_depth() -> usize {
    2
}
fn default_buckets() -> usize {
    2048
}
fn default_base_year() -> f64 {
    2000.0
}
fn default_abs_scale() -> f64 {
    0.1
}

impl BaseConfig {
    pub fn new(id: impl Into<String>, kind: BaseKind) -> Self {
        BaseConfig {
            id: id.into(),
            kind,
            dim: default_dim(),
            width: default_width(),
            depth: default_depth(),
            text_buckets: default_buckets(),
            time_base_year: default_base_year(),
            time_abs_scale: default_abs_scale(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTopology {
    pub config: BaseConfig,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskType>,
    pub columns: Vec<ColTopo>,
}

impl BaseTopology {
    /// The attribute encoders only read the hashing and time knobs, so the
    /// rest of the struct stays at defaults.
    pub fn encoder_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.config.dim,
            text_buckets: self.config.text_buckets,
            time_base_year: self.config.time_base_year,
            time_abs_scale: self.config.time_abs_scale,
            ..ModelConfig::default()
        }
    }

    pub fn attach(&self) -> BaseAttach {
        BaseAttach { id: self.config.id.clone(), width: self.config.width }
    }
}

/// Fit a base topology against the slice's target table, holding the label
/// column out of the features.
pub fn build_base_topology(
    slice: &DataSlice,
    config: BaseConfig,
    task: Option<TaskType>,
    label_column: Option<&str>,
) -> Result<BaseTopology> {
    let target = slice.target();
    if let Some(label) = label_column {
        if target.column_index(label).is_none() {
            return Err(
                ModelError::Config(format!("label column {label:?} is not in table {:?}", target.name))
                    .into(),
            );
        }
    }
    let columns = column_topos(target, label_column);
    if columns.is_empty() {
        return Err(ModelError::Config(format!("table {:?} has no feature columns", target.name)).into());
    }
    Ok(BaseTopology {
        config,
        table: slice.target_table.clone(),
        label_column: label_column.map(str::to_string),
        task,
        columns,
    })
}

fn base_param_specs(topo: &BaseTopology) -> Vec<ParamSpec> {
    let cfg = &topo.config;
    let d = cfg.dim;
    let p = format!("base.{}", cfg.id);
    let mut out = Vec::new();
    column_param_specs(&format!("{p}.col"), &topo.columns, d, &mut out);
    let has = |kind: ColumnKind| topo.columns.iter().any(|c| c.kind == kind);
    shared_encoder_specs(&p, has(ColumnKind::Text), has(ColumnKind::Timestamp), d, cfg.text_buckets, &mut out);
    let in_dim = topo.columns.len() * d;
    match cfg.kind {
        BaseKind::Dnn => {
            for l in 0..cfg.depth {
                let fan_in = if l == 0 { in_dim } else { cfg.width };
                out.push(ParamSpec::new(format!("{p}.trunk.l{l}.w"), fan_in, cfg.width, Init::Uniform { fan_in }));
                out.push(ParamSpec::new(format!("{p}.trunk.l{l}.b"), 1, cfg.width, Init::Zeros));
            }
        }
        BaseKind::ResnetMlp => {
            out.push(ParamSpec::new(format!("{p}.trunk.in.w"), in_dim, cfg.width, Init::Uniform { fan_in: in_dim }));
            out.push(ParamSpec::new(format!("{p}.trunk.in.b"), 1, cfg.width, Init::Zeros));
            for k in 0..cfg.depth {
                out.push(ParamSpec::new(format!("{p}.trunk.blk{k}.w1"), cfg.width, cfg.width, Init::Uniform { fan_in: cfg.width }));
                out.push(ParamSpec::new(format!("{p}.trunk.blk{k}.b1"), 1, cfg.width, Init::Zeros));
                out.push(ParamSpec::new(format!("{p}.trunk.blk{k}.w2"), cfg.width, cfg.width, Init::Uniform { fan_in: cfg.width }));
                out.push(ParamSpec::new(format!("{p}.trunk.blk{k}.b2"), 1, cfg.width, Init::Zeros));
            }
        }
    }
    out.push(ParamSpec::new(format!("{p}.head.w"), cfg.width, 1, Init::Uniform { fan_in: cfg.width }));
    out.push(ParamSpec::new(format!("{p}.head.b"), 1, 1, Init::Zeros));
    out
}

#[derive(Debug, Clone)]
pub struct BaseBundle {
    pub topology: BaseTopology,
    pub seed: u64,
    pub store: ParamStore,
}

pub fn init_base(topology: BaseTopology, seed: u64) -> BaseBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_params(base_param_specs(&topology), &mut rng, &mut store);
    BaseBundle { topology, seed, store }
}

impl BaseBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            topology: serde_json::to_value(&self.topology)
                .map_err(|e| BaseError::Registry(format!("topology encode: {e}")))?,
        };
        save_checkpoint(path, &manifest, &self.store)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<BaseBundle> {
        let (manifest, store) = load_into_store(path)?;
        let topology: BaseTopology = serde_json::from_value(manifest.topology)
            .map_err(|e| BaseError::Registry(format!("topology decode: {e}")))?;
        Ok(BaseBundle { topology, seed: manifest.seed, store })
    }

    /// Copy this model's tensors into another store under the same names,
    /// marking them trainable or frozen for the receiving training run.
    pub fn merge_into(&self, store: &mut ParamStore, trainable: bool) {
        for (name, tensor) in self.store.iter() {
            store.insert(name.to_string(), tensor.clone(), trainable);
        }
    }
}

fn trunk(fp: &mut ForwardPass, topo: &BaseTopology, x: NodeId) -> model::Result<NodeId> {
    let cfg = &topo.config;
    let p = format!("base.{}", cfg.id);
    match cfg.kind {
        BaseKind::Dnn => {
            let mut h = x;
            for l in 0..cfg.depth {
                let w = fp.param(&format!("{p}.trunk.l{l}.w"))?;
                let b = fp.param(&format!("{p}.trunk.l{l}.b"))?;
                let z = linear(&mut fp.tape, h, w, b)?;
                h = fp.tape.relu(z);
            }
            Ok(h)
        }
        BaseKind::ResnetMlp => {
            let wi = fp.param(&format!("{p}.trunk.in.w"))?;
            let bi = fp.param(&format!("{p}.trunk.in.b"))?;
            let mut h = linear(&mut fp.tape, x, wi, bi)?;
            for k in 0..cfg.depth {
                let w1 = fp.param(&format!("{p}.trunk.blk{k}.w1"))?;
                let b1 = fp.param(&format!("{p}.trunk.blk{k}.b1"))?;
                let w2 = fp.param(&format!("{p}.trunk.blk{k}.w2"))?;
                let b2 = fp.param(&format!("{p}.trunk.blk{k}.b2"))?;
                let z1 = linear(&mut fp.tape, h, w1, b1)?;
                let a1 = fp.tape.relu(z1);
                let z2 = linear(&mut fp.tape, a1, w2, b2)?;
                h = fp.tape.add(h, z2)?;
            }
            Ok(h)
        }
    }
}

fn head(fp: &mut ForwardPass, topo: &BaseTopology, repr: NodeId) -> model::Result<NodeId> {
    let p = format!("base.{}", topo.config.id);
    let w = fp.param(&format!("{p}.head.w"))?;
    let b = fp.param(&format!("{p}.head.b"))?;
    Ok(linear(&mut fp.tape, repr, w, b)?)
}

/// Encode and run several target-table rows at once; rows of the returned
/// pair correspond to the input rows.
pub fn base_forward_batch(
    fp: &mut ForwardPass,
    topo: &BaseTopology,
    rows: &[Vec<&Value>],
) -> model::Result<(NodeId, NodeId)> {
    if rows.is_empty() {
        return Err(ModelError::Config("base forward needs at least one row".into()));
    }
    let cfg = topo.encoder_config();
    let ns = EncoderNs::base(&topo.config.id);
    let mut x_rows = Vec::with_capacity(rows.len());
    for values in rows {
        let embeds = attribute_embeds(fp, &cfg, &ns, &topo.columns, values)?;
        x_rows.push(fp.tape.concat_cols(&embeds)?);
    }
    let x = fp.tape.concat_rows(&x_rows)?;
    let repr = trunk(fp, topo, x)?;
    let pred = head(fp, topo, repr)?;
    Ok((repr, pred))
}

pub fn base_forward(
    fp: &mut ForwardPass,
    topo: &BaseTopology,
    values: &[&Value],
) -> model::Result<(NodeId, NodeId)> {
    base_forward_batch(fp, topo, &[values.to_vec()])
}

/// Positions of the topology's feature columns inside a slice table.
pub fn column_indices(topo: &BaseTopology, table: &SliceTable) -> model::Result<Vec<usize>> {
    topo.columns
        .iter()
        .map(|c| {
            table.column_index(&c.name).ok_or_else(|| {
                ModelError::Config(format!("column {}.{} missing from slice", topo.table, c.name))
            })
        })
        .collect()
}

/// A per-row representation closure in the shape the wrapped forward pass
/// expects.
pub fn base_hook<'a>(
    topo: &'a BaseTopology,
    table: &'a SliceTable,
) -> model::Result<impl FnMut(&mut ForwardPass<'_>, usize) -> model::Result<NodeId> + 'a> {
    let idx = column_indices(topo, table)?;
    Ok(move |fp: &mut ForwardPass<'_>, row: usize| {
        let values: Vec<&Value> = idx.iter().map(|&ci| &table.rows[row][ci]).collect();
        let (repr, _) = base_forward(fp, topo, &values)?;
        Ok(repr)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub kind: BaseKind,
    pub file: String,
    pub seed: u64,
    /// Task the checkpoint was trained on, when any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trained_on: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct PoolManifest {
    models: Vec<PoolEntry>,
}

/// Directory of base-model checkpoints plus a manifest naming them.
#[derive(Debug)]
pub struct BasePool {
    dir: PathBuf,
    entries: Vec<PoolEntry>,
}

const MANIFEST_FILE: &str = "pool.json";

impl BasePool {
    pub fn open(dir: &Path) -> Result<BasePool> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut entries = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path)?;
            let manifest: PoolManifest = serde_json::from_str(&text)
                .map_err(|e| BaseError::Registry(format!("manifest parse: {e}")))?;
            manifest.models
        } else {
            Vec::new()
        };
        entries.sort_by(|a, b| a.id.cmp(&b.id));
        for pair in entries.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(BaseError::Registry(format!("duplicate model id {:?}", pair[0].id)));
            }
        }
        Ok(BasePool { dir: dir.to_path_buf(), entries })
    }

    pub fn list(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn register(&mut self, bundle: &BaseBundle, trained_on: Option<&str>) -> Result<()> {
        let id = bundle.topology.config.id.clone();
        if self.entries.iter().any(|e| e.id == id) {
            return Err(BaseError::Registry(format!("duplicate model id {id:?}")));
        }
        let file = format!("{id}.ckpt");
        std::fs::create_dir_all(&self.dir)?;
        bundle.save(&self.dir.join(&file))?;
        self.entries.push(PoolEntry {
            id,
            kind: bundle.topology.config.kind,
            file,
            seed: bundle.seed,
            trained_on: trained_on.map(str::to_string),
        });
        self.entries.sort_by(|a, b| a.id.cmp(&b.id));
        self.write_manifest()
    }

    /// Re-save an already registered model's checkpoint (after training).
    pub fn update(&mut self, bundle: &BaseBundle, trained_on: Option<&str>) -> Result<()> {
        let id = &bundle.topology.config.id;
        let entry = self
            .entries
            .iter_mut()
            .find(|e| &e.id == id)
            .ok_or_else(|| BaseError::Registry(format!("unknown model id {id:?}")))?;
        entry.trained_on = trained_on.map(str::to_string);
        entry.seed = bundle.seed;
        let file = self.dir.join(&entry.file);
        bundle.save(&file)?;
        self.write_manifest()
    }

    pub fn load(&self, id: &str) -> Result<BaseBundle> {
        let entry = self
            .entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| BaseError::Registry(format!("unknown model id {id:?}")))?;
        BaseBundle::load(&self.dir.join(&entry.file))
    }

    fn write_manifest(&self) -> Result<()> {
        let manifest = PoolManifest { models: self.entries.clone() };
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| BaseError::Registry(format!("manifest encode: {e}")))?;
        std::fs::write(self.dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::parse_timestamp;
    use crate::tensor::gradcheck::{grad_check, BoundGraph, DEFAULT_STEP};

    fn topo(kind: BaseKind) -> BaseTopology {
        BaseTopology {
            config: BaseConfig {
                dim: 3,
                width: 4,
                text_buckets: 8,
                ..BaseConfig::new("m0", kind)
            },
            table: "users".into(),
            label_column: Some("churn".into()),
            task: Some(TaskType::Classification),
            columns: vec![
                ColTopo { name: "age".into(), kind: ColumnKind::Numerical, vocab: None },
                ColTopo {
                    name: "city".into(),
                    kind: ColumnKind::Categorical,
                    vocab: Some(vec!["berlin".into(), "tokyo".into()]),
                },
                ColTopo { name: "note".into(), kind: ColumnKind::Text, vocab: None },
                ColTopo { name: "joined".into(), kind: ColumnKind::Timestamp, vocab: None },
            ],
        }
    }

    fn sample_values() -> Vec<Value> {
        vec![
            Value::Num(37.0),
            Value::Cat("tokyo".into()),
            Value::Text("quick brown fox".into()),
            Value::Ts(parse_timestamp("2023-06-01T12:00:00").unwrap()),
        ]
    }

    fn predict(bundle: &BaseBundle, values: &[Value]) -> (Vec<f64>, f64) {
        let refs: Vec<&Value> = values.iter().collect();
        let mut fp = ForwardPass::new(&bundle.store);
        let (repr, pred) = base_forward(&mut fp, &bundle.topology, &refs).unwrap();
        (fp.tape.value(repr).data().to_vec(), fp.tape.value(pred).data()[0])
    }

    #[test]
    fn zeroed_dnn_trunk_reports_only_the_head_bias() {
        let mut bundle = init_base(topo(BaseKind::Dnn), 3);
        for l in 0..2 {
            for part in ["w", "b"] {
                let t = bundle.store.get_mut(&format!("base.m0.trunk.l{l}.{part}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        bundle.store.get_mut("base.m0.head.b").unwrap().data_mut()[0] = 0.625;
        let (repr, pred) = predict(&bundle, &sample_values());
        assert_eq!(repr, vec![0.0; 4]);
        assert_eq!(pred, 0.625);
    }

    #[test]
    fn resnet_blocks_with_zero_branches_pass_input_through() {
        let mut bundle = init_base(topo(BaseKind::ResnetMlp), 3);
        for k in 0..2 {
            for part in ["w1", "b1", "w2", "b2"] {
                let t = bundle.store.get_mut(&format!("base.m0.trunk.blk{k}.{part}")).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let values = sample_values();
        let refs: Vec<&Value> = values.iter().collect();
        let mut fp = ForwardPass::new(&bundle.store);
        let (repr, _) = base_forward(&mut fp, &bundle.topology, &refs).unwrap();
        // Rebuild just the input projection on the same tape.
        let cfg = bundle.topology.encoder_config();
        let ns = EncoderNs::base("m0");
        let embeds = attribute_embeds(&mut fp, &cfg, &ns, &bundle.topology.columns, &refs).unwrap();
        let x = fp.tape.concat_cols(&embeds).unwrap();
        let wi = fp.param("base.m0.trunk.in.w").unwrap();
        let bi = fp.param("base.m0.trunk.in.b").unwrap();
        let proj = linear(&mut fp.tape, x, wi, bi).unwrap();
        assert_eq!(fp.tape.value(repr).data(), fp.tape.value(proj).data());
    }

    #[test]
    fn gradients_check_out_for_both_kinds() {
        for kind in [BaseKind::Dnn, BaseKind::ResnetMlp] {
            let topo = topo(kind);
            let mut bundle = init_base(topo.clone(), 9);
            let values = sample_values();
            let report = grad_check(
                &mut bundle.store,
                |s| {
                    let refs: Vec<&Value> = values.iter().collect();
                    let mut fp = ForwardPass::new(s);
                    let (repr, pred) = base_forward(&mut fp, &topo, &refs)
                        .map_err(|e| TensorError::Config(e.to_string()))?;
                    let a = fp.tape.sum_all(pred);
                    let b = fp.tape.mean_all(repr);
                    let loss = fp.tape.add(a, b)?;
                    Ok(BoundGraph { graph: fp.tape, loss, binding: fp.bind })
                },
                DEFAULT_STEP,
            )
            .unwrap();
            assert!(report.checked > 50, "{} params checked", report.checked);
            assert!(
                report.max_rel_err < 1e-4,
                "{:?}: worst {} at {}[{}]",
                kind,
                report.max_rel_err,
                report.worst_param,
                report.worst_index
            );
        }
    }

    #[test]
    fn representation_width_matches_the_descriptor() {
        let bundle = init_base(topo(BaseKind::Dnn), 5);
        let attach = bundle.topology.attach();
        assert_eq!(attach.id, "m0");
        let (repr, _) = predict(&bundle, &sample_values());
        assert_eq!(repr.len(), attach.width);
    }

    #[test]
    fn batch_rows_match_single_row_forwards() {
        let bundle = init_base(topo(BaseKind::ResnetMlp), 11);
        let a = sample_values();
        let mut b = sample_values();
        b[0] = Value::Num(61.0);
        b[1] = Value::Cat("berlin".into());
        let rows: Vec<Vec<&Value>> = vec![a.iter().collect(), b.iter().collect()];
        let mut fp = ForwardPass::new(&bundle.store);
        let (_, pred) = base_forward_batch(&mut fp, &bundle.topology, &rows).unwrap();
        let batch = fp.tape.value(pred).data().to_vec();
        assert_eq!(batch.len(), 2);
        let (_, single_a) = predict(&bundle, &a);
        let (_, single_b) = predict(&bundle, &b);
        assert_eq!(batch[0], single_a);
        assert_eq!(batch[1], single_b);
    }

    #[test]
    fn pool_lists_models_in_id_order_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = BasePool::open(dir.path()).unwrap();
        assert!(pool.list().is_empty());
        let beta = init_base(
            BaseTopology { config: BaseConfig { id: "beta".into(), ..topo(BaseKind::ResnetMlp).config }, ..topo(BaseKind::ResnetMlp) },
            2,
        );
        let alpha = init_base(
            BaseTopology { config: BaseConfig { id: "alpha".into(), ..topo(BaseKind::Dnn).config }, ..topo(BaseKind::Dnn) },
            1,
        );
        pool.register(&beta, None).unwrap();
        pool.register(&alpha, Some("churn_7d")).unwrap();
        let ids: Vec<&str> = pool.list().iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, vec!["alpha", "beta"]);
        assert_eq!(pool.list()[0].kind, BaseKind::Dnn);
        assert_eq!(pool.list()[0].trained_on.as_deref(), Some("churn_7d"));
        let dup = init_base(
            BaseTopology { config: BaseConfig { id: "alpha".into(), ..topo(BaseKind::Dnn).config }, ..topo(BaseKind::Dnn) },
            4,
        );
        assert!(matches!(pool.register(&dup, None), Err(BaseError::Registry(_))));
        assert!(matches!(pool.load("gamma"), Err(BaseError::Registry(_))));
    }

    #[test]
    fn pool_round_trip_reproduces_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let mut pool = BasePool::open(dir.path()).unwrap();
        let bundle = init_base(topo(BaseKind::Dnn), 13);
        pool.register(&bundle, None).unwrap();
        // Reopen from disk to exercise the manifest path too.
        let reopened = BasePool::open(dir.path()).unwrap();
        let loaded = reopened.load("m0").unwrap();
        let values = sample_values();
        let (repr_a, pred_a) = predict(&bundle, &values);
        let (repr_b, pred_b) = predict(&loaded, &values);
        assert!((pred_a - pred_b).abs() < 1e-12);
        for (x, y) in repr_a.iter().zip(&repr_b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
