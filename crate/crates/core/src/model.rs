//! The relational network: typed attribute encoders, a shared transformer
//! tuple encoder, relation-wise message passing over sampled neighborhoods,
//! attention fusion of neighborhood context with recalibrated importance
//! scores, and a small prediction head. Parameters live in a flat
//! [`ParamStore`] under stable dotted names, so freezing, checkpointing and
//! partial reuse are all name-prefix operations.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{BatchGraph, GraphError, RelGraph};
use crate::profile::TaskType;
use crate::store::{ColumnKind, DataSlice, Relation, SliceTable, StoreError, Value};
use crate::tensor::checkpoint::{load_into_store, save_checkpoint, CheckpointManifest, FORMAT_VERSION};
use crate::tensor::nn::{linear, multi_head_attention, normal_init, Activation, AttnParams};
use crate::tensor::optim::{Binding, ParamStore};
use crate::tensor::{Aggregator, Graph, NodeId, Tensor, TensorError};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Working width d of every embedding and hidden state.
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub mp_layers: usize,
    /// Neighbor aggregation inside message passing.
    pub aggregator: Aggregator,
    pub activation: Activation,
    pub mp_layer_norm: bool,
    pub text_buckets: usize,
    /// Year origin and slope of the absolute time feature.
    pub time_base_year: f64,
    pub time_abs_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 128,
            heads: 2,
            encoder_layers: 2,
            mp_layers: 2,
            aggregator: Aggregator::Sum,
            activation: Activation::Relu,
            mp_layer_norm: true,
            text_buckets: 2048,
            time_base_year: 2000.0,
            time_abs_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if self.encoder_layers == 0 {
            return Err(ModelError::Config("encoder needs at least one layer".into()));
        }
        if self.text_buckets == 0 {
            return Err(ModelError::Config("text_buckets must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColTopo {
    pub name: String,
    pub kind: ColumnKind,
    /// Sorted distinct values seen at fit time; index 0 of the embedding
    /// table is reserved for unseen values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableTopo {
    pub name: String,
    pub columns: Vec<ColTopo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseAttach {
    pub id: String,
    /// Representation width the wrapped base model produces.
    pub width: usize,
}

/// Everything needed to rebuild the parameter set and run the network:
/// dims, per-table column encoders with vocabularies, relation order, and
/// the optional wrapped base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub config: ModelConfig,
    pub target_table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_column: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskType>,
    pub tables: Vec<TableTopo>,
    /// Relation labels in catalog order; fusion slots follow this order.
    pub relations: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseAttach>,
}

impl Topology {
    pub fn table(&self, name: &str) -> Option<&TableTopo> {
        self.tables.iter().find(|t| t.name == name)
    }
}

pub(crate) fn column_topos(table: &SliceTable, exclude: Option<&str>) -> Vec<ColTopo> {
    let mut out = Vec::new();
    for (ci, col) in table.columns.iter().enumerate() {
        if Some(col.name.as_str()) == exclude {
            continue;
        }
        let vocab = (col.kind == ColumnKind::Categorical).then(|| {
            let mut set: Vec<String> = table
                .rows
                .iter()
                .filter_map(|r| match &r[ci] {
                    Value::Cat(s) => Some(s.clone()),
                    _ => None,
                })
                .collect();
            set.sort_unstable();
            set.dedup();
            set
        });
        out.push(ColTopo { name: col.name.clone(), kind: col.kind, vocab });
    }
    out
}

/// Fit a topology against a slice: vocabularies from the observed data, the
/// label column held out of the target table's features.
pub fn build_topology(
    slice: &DataSlice,
    rgraph: &RelGraph,
    config: ModelConfig,
    task: Option<TaskType>,
    label_column: Option<&str>,
    base: Option<BaseAttach>,
) -> Result<Topology> {
    config.validate()?;
    if let Some(label) = label_column {
        if slice.target().column_index(label).is_none() {
            return Err(ModelError::Config(format!(
                "label column {label:?} is not in table {:?}",
                slice.target_table
            )));
        }
    }
    let mut tables = Vec::new();
    for (name, table) in &slice.tables {
        let exclude = (name == &slice.target_table).then_some(label_column).flatten();
        let columns = column_topos(table, exclude);
        if columns.is_empty() {
            return Err(ModelError::Config(format!("table {name:?} has no feature columns")));
        }
        tables.push(TableTopo { name: name.clone(), columns });
    }
    Ok(Topology {
        config,
        target_table: slice.target_table.clone(),
        label_column: label_column.map(str::to_string),
        task,
        tables,
        relations: rgraph.relations.iter().map(|r| r.label()).collect(),
        base,
    })
}

pub(crate) enum Init {
    Uniform { fan_in: usize },
    Normal { std: f64 },
    Zeros,
    Ones,
}

pub(crate) struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

impl ParamSpec {
    pub(crate) fn new(name: String, rows: usize, cols: usize, init: Init) -> Self {
        ParamSpec { name, rows, cols, init }
    }
}

/// Attribute-encoder parameters for one column set, shared between the main
/// encoder and the base models.
pub(crate) fn column_param_specs(prefix: &str, cols: &[ColTopo], dim: usize, out: &mut Vec<ParamSpec>) {
    let embed_std = 1.0 / (dim as f64).sqrt();
    for col in cols {
        let p = format!("{prefix}.{}", col.name);
        match col.kind {
            ColumnKind::Categorical => {
                let vocab = col.vocab.as_ref().map(Vec::len).unwrap_or(0);
                out.push(ParamSpec::new(format!("{p}.embed"), vocab + 1, dim, Init::Normal { std: embed_std }));
            }
            ColumnKind::Numerical => {
                out.push(ParamSpec::new(format!("{p}.scale"), 1, dim, Init::Uniform { fan_in: dim }));
                out.push(ParamSpec::new(format!("{p}.bias"), 1, dim, Init::Uniform { fan_in: dim }));
            }
            ColumnKind::Text | ColumnKind::Timestamp => {}
        }
        out.push(ParamSpec::new(format!("{p}.null"), 1, dim, Init::Normal { std: embed_std }));
    }
}

/// Text and time projections shared by every column of the owning network.
pub(crate) fn shared_encoder_specs(
    prefix: &str,
    cols_have_text: bool,
    cols_have_time: bool,
    dim: usize,
    buckets: usize,
    out: &mut Vec<ParamSpec>,
) {
    if cols_have_text {
        out.push(ParamSpec::new(format!("{prefix}.text.w"), buckets, dim, Init::Uniform { fan_in: buckets }));
    }
    if cols_have_time {
        out.push(ParamSpec::new(format!("{prefix}.time.w"), 7, dim, Init::Uniform { fan_in: 7 }));
        out.push(ParamSpec::new(format!("{prefix}.time.b"), 1, dim, Init::Zeros));
    }
}

fn attn_specs(prefix: &str, dim: usize, out: &mut Vec<ParamSpec>) {
    for name in ["q", "k", "v", "o"] {
        out.push(ParamSpec::new(format!("{prefix}.{name}.w"), dim, dim, Init::Uniform { fan_in: dim }));
    }
}

fn ln_specs(prefix: &str, width: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec::new(format!("{prefix}.gain"), 1, width, Init::Ones));
    out.push(ParamSpec::new(format!("{prefix}.bias"), 1, width, Init::Zeros));
}

fn param_specs(topo: &Topology) -> Vec<ParamSpec> {
    let d = topo.config.dim;
    let d_ff = 2 * d;
    let mut out = Vec::new();
    for table in &topo.tables {
        column_param_specs(&format!("encoder.col.{}", table.name), &table.columns, d, &mut out);
    }
    let any = |kind: ColumnKind| topo.tables.iter().any(|t| t.columns.iter().any(|c| c.kind == kind));
    shared_encoder_specs("encoder", any(ColumnKind::Text), any(ColumnKind::Timestamp), d, topo.config.text_buckets, &mut out);
    for i in 0..topo.config.encoder_layers {
        let p = format!("encoder.layer{i}");
        attn_specs(&format!("{p}.attn"), d, &mut out);
        ln_specs(&format!("{p}.ln1"), d, &mut out);
        out.push(ParamSpec::new(format!("{p}.ffn.w1"), d, d_ff, Init::Uniform { fan_in: d }));
        out.push(ParamSpec::new(format!("{p}.ffn.b1"), 1, d_ff, Init::Zeros));
        out.push(ParamSpec::new(format!("{p}.ffn.w2"), d_ff, d, Init::Uniform { fan_in: d_ff }));
        out.push(ParamSpec::new(format!("{p}.ffn.b2"), 1, d, Init::Zeros));
        ln_specs(&format!("{p}.ln2"), d, &mut out);
    }
    let embed_std = 1.0 / (d as f64).sqrt();
    for table in &topo.tables {
        out.push(ParamSpec::new(format!("encoder.table.{}.cls", table.name), 1, d, Init::Normal { std: embed_std }));
        ln_specs(&format!("encoder.table.{}.out_ln", table.name), 2 * d, &mut out);
    }
    out.push(ParamSpec::new("encoder.out_proj.w".into(), 2 * d, d, Init::Uniform { fan_in: 2 * d }));
    out.push(ParamSpec::new("encoder.out_proj.b".into(), 1, d, Init::Zeros));
    for l in 0..topo.config.mp_layers {
        let p = format!("relmp.layer{l}");
        for r in 0..topo.relations.len() {
            out.push(ParamSpec::new(format!("{p}.rel{r}.wh"), d, d, Init::Uniform { fan_in: d }));
            out.push(ParamSpec::new(format!("{p}.rel{r}.ws"), d, d, Init::Uniform { fan_in: d }));
        }
        out.push(ParamSpec::new(format!("{p}.self.w"), d, d, Init::Uniform { fan_in: d }));
        ln_specs(&format!("{p}.ln"), d, &mut out);
    }
    attn_specs("fusion.attn", d, &mut out);
    ln_specs("head.ln", d, &mut out);
    out.push(ParamSpec::new("head.w1".into(), d, d, Init::Uniform { fan_in: d }));
    out.push(ParamSpec::new("head.b1".into(), 1, d, Init::Zeros));
    out.push(ParamSpec::new("head.w2".into(), d, 1, Init::Uniform { fan_in: d }));
    out.push(ParamSpec::new("head.b2".into(), 1, 1, Init::Zeros));
    out.push(ParamSpec::new("pretrain.mask".into(), 1, d, Init::Normal { std: embed_std }));
    out.push(ParamSpec::new("pretrain.recon.w".into(), 2 * d, d, Init::Uniform { fan_in: 2 * d }));
    out.push(ParamSpec::new("pretrain.recon.b".into(), 1, d, Init::Zeros));
    // Kept last so earlier tensors draw identical values with or without a
    // wrapped base model.
    if let Some(base) = &topo.base {
        out.push(ParamSpec::new("wrap.w".into(), base.width + d, d, Init::Uniform { fan_in: base.width + d }));
        out.push(ParamSpec::new("wrap.b".into(), 1, d, Init::Zeros));
    }
    out
}

pub(crate) fn init_params(specs: Vec<ParamSpec>, rng: &mut ChaCha8Rng, store: &mut ParamStore) {
    for spec in specs {
        let t = match spec.init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let data: Vec<f64> =
                    (0..spec.rows * spec.cols).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::matrix(spec.rows, spec.cols, data).expect("sized by construction")
            }
            Init::Normal { std } => normal_init(rng, spec.rows, spec.cols, std),
            Init::Zeros => Tensor::zeros(vec![spec.rows, spec.cols]),
            Init::Ones => Tensor::matrix(spec.rows, spec.cols, vec![1.0; spec.rows * spec.cols])
                .expect("sized by construction"),
        };
        store.insert(spec.name, t, true);
    }
}

/// A trained or initialized network: topology plus the flat parameter set.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub topology: Topology,
    pub seed: u64,
    pub store: ParamStore,
}

pub fn init_bundle(topology: Topology, seed: u64) -> Result<ModelBundle> {
    topology.config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_params(param_specs(&topology), &mut rng, &mut store);
    Ok(ModelBundle { topology, seed, store })
}

impl ModelBundle {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            seed: self.seed,
            topology: serde_json::to_value(&self.topology)
                .map_err(|e| ModelError::Config(format!("topology encode: {e}")))?,
        };
        save_checkpoint(path, &manifest, &self.store)?;
        Ok(())
    }

    /// Load with every tensor frozen; training code re-enables what it owns.
    pub fn load(path: &std::path::Path) -> Result<ModelBundle> {
        let (manifest, store) = load_into_store(path)?;
        let topology: Topology = serde_json::from_value(manifest.topology)
            .map_err(|e| ModelError::Config(format!("topology decode: {e}")))?;
        Ok(ModelBundle { topology, seed: manifest.seed, store })
    }

    /// Silence every pathway through which neighborhood context can reach
    /// the prediction: neighbor-summary weights, the fusion value path, and
    /// the encoder half of the base wrap. Useful as a control arm.
    pub fn zero_effect_init(&mut self) {
        let zero = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for l in 0..self.topology.config.mp_layers {
            for r in 0..self.topology.relations.len() {
                if let Some(t) = self.store.get_mut(&format!("relmp.layer{l}.rel{r}.ws")) {
                    zero(t);
                }
            }
        }
        if let Some(t) = self.store.get_mut("fusion.attn.v.w") {
            zero(t);
        }
        if let Some(base) = &self.topology.base {
            let d = self.topology.config.dim;
            if let Some(t) = self.store.get_mut("wrap.w") {
                let cols = t.cols();
                for row in base.width..base.width + d {
                    for c in 0..cols {
                        t.data_mut()[row * cols + c] = 0.0;
                    }
                }
            }
        }
    }
}

/// One tape plus the lazy parameter binding for a single forward pass.
pub struct ForwardPass<'s> {
    pub tape: Graph,
    pub bind: Binding,
    store: &'s ParamStore,
}

impl<'s> ForwardPass<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        ForwardPass { tape: Graph::new(), bind: Binding::new(), store }
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        Ok(self.bind.get(&mut self.tape, self.store, name)?)
    }
}

/// Name prefixes for one attribute-encoder family. The main encoder keys
/// columns by table; base models flatten to their own namespace.
#[derive(Debug, Clone)]
pub struct EncoderNs {
    pub col_prefix: String,
    pub shared_prefix: String,
}

impl EncoderNs {
    pub fn encoder(table: &str) -> Self {
        EncoderNs { col_prefix: format!("encoder.col.{table}"), shared_prefix: "encoder".into() }
    }

    pub fn base(id: &str) -> Self {
        EncoderNs { col_prefix: format!("base.{id}.col"), shared_prefix: format!("base.{id}") }
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Signed feature hashing: each whitespace token of "column value" maps to a
/// bucket with a deterministic sign.
pub fn hash_tokens(column: &str, text: &str, buckets: usize) -> Vec<(usize, f64)> {
    let joined = format!("{column} {text}").to_lowercase();
    joined
        .split_whitespace()
        .map(|tok| {
            let h = fnv1a64(tok.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            ((h % buckets as u64) as usize, sign)
        })
        .collect()
}

/// One absolute year offset plus sine/cosine pairs for month, day and hour.
pub fn time_features(ts: NaiveDateTime, base_year: f64, abs_scale: f64) -> [f64; 7] {
    let tau = std::f64::consts::TAU;
    let m = ts.month() as f64;
    let d = ts.day() as f64;
    let h = ts.hour() as f64;
    [
        abs_scale * (ts.year() as f64 - base_year),
        (tau * m / 12.0).sin(),
        (tau * m / 12.0).cos(),
        (tau * d / 31.0).sin(),
        (tau * d / 31.0).cos(),
        (tau * h / 24.0).sin(),
        (tau * h / 24.0).cos(),
    ]
}

/// Map one attribute value into the working width by its column kind.
pub fn encode_attribute(
    fp: &mut ForwardPass,
    cfg: &ModelConfig,
    ns: &EncoderNs,
    col: &ColTopo,
    value: &Value,
) -> Result<NodeId> {
    let p = format!("{}.{}", ns.col_prefix, col.name);
    if value.is_null() {
        return fp.param(&format!("{p}.null"));
    }
    match (col.kind, value) {
        (ColumnKind::Categorical, Value::Cat(s)) => {
            let vocab = col
                .vocab
                .as_ref()
                .ok_or_else(|| ModelError::Config(format!("column {} has no vocabulary", col.name)))?;
            let idx = vocab.binary_search(s).map(|i| i + 1).unwrap_or(0);
            let embed = fp.param(&format!("{p}.embed"))?;
            Ok(fp.tape.gather_rows(embed, &[idx])?)
        }
        (ColumnKind::Numerical, Value::Num(x)) => {
            let scale = fp.param(&format!("{p}.scale"))?;
            let bias = fp.param(&format!("{p}.bias"))?;
            let scaled = fp.tape.scale(scale, *x);
            Ok(fp.tape.add(scaled, bias)?)
        }
        (ColumnKind::Text, Value::Text(s)) => {
            let tokens = hash_tokens(&col.name, s, cfg.text_buckets);
            let w = fp.param(&format!("{}.text.w", ns.shared_prefix))?;
            let ids: Vec<usize> = tokens.iter().map(|&(b, _)| b).collect();
            let signs: Vec<f64> = tokens.iter().map(|&(_, s)| s).collect();
            let rows = fp.tape.gather_rows(w, &ids)?;
            let signed = fp.tape.scale_rows(rows, &signs)?;
            let seg = vec![0usize; ids.len()];
            Ok(fp.tape.segment_aggregate(signed, &seg, 1, Aggregator::Sum)?)
        }
        (ColumnKind::Timestamp, Value::Ts(t)) => {
            let feats = time_features(*t, cfg.time_base_year, cfg.time_abs_scale);
            let f = fp.tape.constant(Tensor::matrix(1, 7, feats.to_vec()).expect("fixed width"));
            let w = fp.param(&format!("{}.time.w", ns.shared_prefix))?;
            let b = fp.param(&format!("{}.time.b", ns.shared_prefix))?;
            Ok(linear(&mut fp.tape, f, w, b)?)
        }
        (kind, v) => Err(ModelError::Config(format!(
            "column {} expects {kind:?}, got {v}",
            col.name
        ))),
    }
}

/// Encode every feature column of one row.
pub fn attribute_embeds(
    fp: &mut ForwardPass,
    cfg: &ModelConfig,
    ns: &EncoderNs,
    cols: &[ColTopo],
    values: &[&Value],
) -> Result<Vec<NodeId>> {
    if cols.len() != values.len() {
        return Err(ModelError::Config(format!(
            "{} columns but {} values",
            cols.len(),
            values.len()
        )));
    }
    cols.iter().zip(values).map(|(c, v)| encode_attribute(fp, cfg, ns, c, v)).collect()
}

/// Run the shared transformer stack over [cls, attributes] token rows.
pub fn encode_tokens(
    fp: &mut ForwardPass,
    cfg: &ModelConfig,
    attrs: &[NodeId],
    cls: NodeId,
) -> Result<NodeId> {
    if attrs.is_empty() {
        return Err(ModelError::Config("tuple has zero attributes".into()));
    }
    let mut rows = Vec::with_capacity(attrs.len() + 1);
    rows.push(cls);
    rows.extend_from_slice(attrs);
    let mut e = fp.tape.concat_rows(&rows)?;
    for i in 0..cfg.encoder_layers {
        let p = format!("encoder.layer{i}");
        let attn = AttnParams {
            wq: fp.param(&format!("{p}.attn.q.w"))?,
            wk: fp.param(&format!("{p}.attn.k.w"))?,
            wv: fp.param(&format!("{p}.attn.v.w"))?,
            wo: fp.param(&format!("{p}.attn.o.w"))?,
        };
        let a = multi_head_attention(&mut fp.tape, e, &attn, cfg.heads)?;
        let res = fp.tape.add(e, a.out)?;
        let g1 = fp.param(&format!("{p}.ln1.gain"))?;
        let b1 = fp.param(&format!("{p}.ln1.bias"))?;
        let h1 = fp.tape.layer_norm(res, g1, b1, LN_EPS)?;
        let w1 = fp.param(&format!("{p}.ffn.w1"))?;
        let fb1 = fp.param(&format!("{p}.ffn.b1"))?;
        let w2 = fp.param(&format!("{p}.ffn.w2"))?;
        let fb2 = fp.param(&format!("{p}.ffn.b2"))?;
        let f1 = linear(&mut fp.tape, h1, w1, fb1)?;
        let f1a = fp.tape.relu(f1);
        let f2 = linear(&mut fp.tape, f1a, w2, fb2)?;
        let res2 = fp.tape.add(h1, f2)?;
        let g2 = fp.param(&format!("{p}.ln2.gain"))?;
        let b2 = fp.param(&format!("{p}.ln2.bias"))?;
        e = fp.tape.layer_norm(res2, g2, b2, LN_EPS)?;
    }
    Ok(e)
}

/// Collapse token outputs to one tuple embedding: cls row next to the mean
/// of the attribute rows, normalized per table, then projected back to d.
pub fn tuple_from_tokens(
    fp: &mut ForwardPass,
    table: &str,
    n_attrs: usize,
    tokens: NodeId,
) -> Result<NodeId> {
    let cls_out = fp.tape.gather_rows(tokens, &[0])?;
    let attr_idx: Vec<usize> = (1..=n_attrs).collect();
    let attr_rows = fp.tape.gather_rows(tokens, &attr_idx)?;
    let pooled = fp.tape.mean_rows(attr_rows)?;
    let raw = fp.tape.concat_cols(&[cls_out, pooled])?;
    let g = fp.param(&format!("encoder.table.{table}.out_ln.gain"))?;
    let b = fp.param(&format!("encoder.table.{table}.out_ln.bias"))?;
    let normed = fp.tape.layer_norm(raw, g, b, LN_EPS)?;
    let w = fp.param("encoder.out_proj.w")?;
    let pb = fp.param("encoder.out_proj.b")?;
    Ok(linear(&mut fp.tape, normed, w, pb)?)
}

pub fn encode_tuple(
    fp: &mut ForwardPass,
    cfg: &ModelConfig,
    table: &TableTopo,
    values: &[&Value],
) -> Result<NodeId> {
    let ns = EncoderNs::encoder(&table.name);
    let embeds = attribute_embeds(fp, cfg, &ns, &table.columns, values)?;
    let cls = fp.param(&format!("encoder.table.{}.cls", table.name))?;
    let tokens = encode_tokens(fp, cfg, &embeds, cls)?;
    tuple_from_tokens(fp, &table.name, embeds.len(), tokens)
}

/// One round of relation-wise updates over the batch adjacency. Nodes
/// average the per-relation updates of relations they actually have
/// neighbors under; nodes with none take a dedicated self path.
pub fn message_pass_layer(
    fp: &mut ForwardPass,
    cfg: &ModelConfig,
    layer: usize,
    adj: &[Vec<Vec<usize>>],
    h: NodeId,
) -> Result<NodeId> {
    let n = fp.tape.value(h).rows();
    let d = fp.tape.value(h).cols();
    let prefix = format!("relmp.layer{layer}");
    let mut counts = vec![0usize; n];
    let mut acc: Option<NodeId> = None;
    for (r, per_node) in adj.iter().enumerate() {
        let receivers: Vec<usize> = (0..n).filter(|&v| !per_node[v].is_empty()).collect();
        if receivers.is_empty() {
            continue;
        }
        let mut senders = Vec::new();
        let mut seg = Vec::new();
        for (slot, &v) in receivers.iter().enumerate() {
            for &u in &per_node[v] {
                senders.push(u);
                seg.push(slot);
            }
        }
        let xs = fp.tape.gather_rows(h, &senders)?;
        let summary = fp.tape.segment_aggregate(xs, &seg, receivers.len(), cfg.aggregator)?;
        let ws = fp.param(&format!("{prefix}.rel{r}.ws"))?;
        let s_mapped = fp.tape.matmul(summary, ws)?;
        // Scatter compact receiver rows back to the full node set through a
        // trailing zero row.
        let zero = fp.tape.constant(Tensor::zeros(vec![1, d]));
        let stacked = fp.tape.concat_rows(&[s_mapped, zero])?;
        let mut slot_of = vec![receivers.len(); n];
        for (slot, &v) in receivers.iter().enumerate() {
            slot_of[v] = slot;
        }
        let s_full = fp.tape.gather_rows(stacked, &slot_of)?;
        let wh = fp.param(&format!("{prefix}.rel{r}.wh"))?;
        let hh = fp.tape.matmul(h, wh)?;
        let mask: Vec<f64> =
            (0..n).map(|v| if per_node[v].is_empty() { 0.0 } else { 1.0 }).collect();
        let hh_masked = fp.tape.scale_rows(hh, &mask)?;
        let contrib = fp.tape.add(hh_masked, s_full)?;
        acc = Some(match acc {
            Some(a) => fp.tape.add(a, contrib)?,
            None => contrib,
        });
        for &v in &receivers {
            counts[v] += 1;
        }
    }
    let w_self = fp.param(&format!("{prefix}.self.w"))?;
    let hs = fp.tape.matmul(h, w_self)?;
    let iso: Vec<f64> = counts.iter().map(|&c| if c == 0 { 1.0 } else { 0.0 }).collect();
    let hs_masked = fp.tape.scale_rows(hs, &iso)?;
    let combined = match acc {
        Some(a) => {
            let inv: Vec<f64> =
                counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
            let averaged = fp.tape.scale_rows(a, &inv)?;
            fp.tape.add(averaged, hs_masked)?
        }
        None => hs_masked,
    };
    let act = cfg.activation.apply(&mut fp.tape, combined);
    if cfg.mp_layer_norm {
        let g = fp.param(&format!("{prefix}.ln.gain"))?;
        let b = fp.param(&format!("{prefix}.ln.bias"))?;
        Ok(fp.tape.layer_norm(act, g, b, LN_EPS)?)
    } else {
        Ok(act)
    }
}

/// Display base per relation: the table across from the target, falling
/// back to the full relation label when two relations share that table.
pub fn slot_bases(relations: &[Relation], target: &str) -> Vec<String> {
    let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
    for rel in relations {
        *tally.entry(rel.other_side(target)).or_default() += 1;
    }
    relations
        .iter()
        .map(|rel| {
            let other = rel.other_side(target);
            if tally[other] > 1 {
                rel.label()
            } else {
                other.to_string()
            }
        })
        .collect()
}

pub struct FusionOut {
    pub z: NodeId,
    /// Head-averaged attention from the self slot to every slot.
    pub alpha: Vec<f64>,
    pub slots: Vec<String>,
}

/// Assemble the context sequence for one seed and attend over it: the
/// seed's own state first, then four aggregates per populated relation in
/// relation order. Returns the fused vector and the attention read-out.
pub fn fuse_context(
    fp: &mut ForwardPass,
    cfg: &ModelConfig,
    relations: &[Relation],
    target: &str,
    adj: &[Vec<Vec<usize>>],
    seed: usize,
    h: NodeId,
) -> Result<FusionOut> {
    let seed_row = fp.tape.gather_rows(h, &[seed])?;
    let mut rows = vec![seed_row];
    let mut slots = vec!["self".to_string()];
    let bases = slot_bases(relations, target);
    for (r, base) in bases.iter().enumerate() {
        let nbrs = &adj[r][seed];
        if nbrs.is_empty() {
            continue;
        }
        let xs = fp.tape.gather_rows(h, nbrs)?;
        let seg = vec![0usize; nbrs.len()];
        for agg in Aggregator::ALL {
            let a = fp.tape.segment_aggregate(xs, &seg, 1, agg)?;
            rows.push(a);
            slots.push(format!("{base}({})", agg.name()));
        }
    }
    let s_mat = fp.tape.concat_rows(&rows)?;
    let attn = AttnParams {
        wq: fp.param("fusion.attn.q.w")?,
        wk: fp.param("fusion.attn.k.w")?,
        wv: fp.param("fusion.attn.v.w")?,
        wo: fp.param("fusion.attn.o.w")?,
    };
    let out = multi_head_attention(&mut fp.tape, s_mat, &attn, cfg.heads)?;
    let z = fp.tape.gather_rows(out.out, &[0])?;
    let mut alpha = vec![0.0; rows.len()];
    for w in &out.weights {
        let v = fp.tape.value(*w);
        for (j, a) in alpha.iter_mut().enumerate() {
            *a += v.data()[j];
        }
    }
    for a in &mut alpha {
        *a /= out.weights.len() as f64;
    }
    Ok(FusionOut { z, alpha, slots })
}

/// Contrast attention against the uniform baseline b = 1/|slots|: weight at
/// or below baseline scores zero, a one-hot slot scores one.
pub fn importance_scores(alpha: &[f64]) -> Vec<f64> {
    if alpha.len() <= 1 {
        return vec![0.0; alpha.len()];
    }
    let b = 1.0 / alpha.len() as f64;
    alpha.iter().map(|&a| ((a - b) / (1.0 - b)).max(0.0)).collect()
}

/// Two-layer head over the fused vector; emits raw logits or regression
/// values, one row per seed.
pub fn predict_head(fp: &mut ForwardPass, cfg: &ModelConfig, z: NodeId) -> Result<NodeId> {
    let act = cfg.activation.apply(&mut fp.tape, z);
    let g = fp.param("head.ln.gain")?;
    let b = fp.param("head.ln.bias")?;
    let ln = fp.tape.layer_norm(act, g, b, LN_EPS)?;
    let w1 = fp.param("head.w1")?;
    let b1 = fp.param("head.b1")?;
    let h1 = linear(&mut fp.tape, ln, w1, b1)?;
    let h1a = fp.tape.relu(h1);
    let w2 = fp.param("head.w2")?;
    let b2 = fp.param("head.b2")?;
    Ok(linear(&mut fp.tape, h1a, w2, b2)?)
}

/// Produces the base model's representation row for a target-table row
/// index, on the shared tape.
pub type BaseHook<'a> = dyn FnMut(&mut ForwardPass<'_>, usize) -> Result<NodeId> + 'a;

pub struct SeedReport {
    pub alpha: Vec<f64>,
    pub importance: Vec<f64>,
    pub slots: Vec<String>,
}

pub struct BatchOutput<'s> {
    pub fp: ForwardPass<'s>,
    /// Raw head outputs, one row per seed.
    pub output: NodeId,
    pub seeds: Vec<SeedReport>,
}

struct TablePrep<'a> {
    topo: &'a TableTopo,
    slice: &'a SliceTable,
    col_idx: Vec<usize>,
}

fn prep_tables<'a>(topo: &'a Topology, slice: &'a DataSlice) -> Result<BTreeMap<&'a str, TablePrep<'a>>> {
    let mut preps = BTreeMap::new();
    for table in &topo.tables {
        let st = slice.table(&table.name)?;
        let col_idx = table
            .columns
            .iter()
            .map(|c| {
                st.column_index(&c.name).ok_or_else(|| {
                    ModelError::Config(format!("column {}.{} missing from slice", table.name, c.name))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        preps.insert(table.name.as_str(), TablePrep { topo: table, slice: st, col_idx });
    }
    Ok(preps)
}

/// Run the whole network over a merged batch of sampled neighborhoods.
/// Every node is tuple-encoded, target rows optionally pick up the wrapped
/// base representation, message passing runs over the batch adjacency, and
/// each seed is fused and scored.
pub fn forward_batch<'b>(
    bundle: &'b ModelBundle,
    slice: &DataSlice,
    rgraph: &RelGraph,
    batch: &BatchGraph,
    mut base: Option<&mut BaseHook<'_>>,
) -> Result<BatchOutput<'b>> {
    let topo = &bundle.topology;
    if topo.base.is_some() != base.is_some() {
        return Err(ModelError::Config(
            "base hook presence must match the topology's base attachment".into(),
        ));
    }
    let graph_labels: Vec<String> = rgraph.relations.iter().map(|r| r.label()).collect();
    if graph_labels != topo.relations {
        return Err(ModelError::Config(format!(
            "graph relations {graph_labels:?} differ from model relations {:?}",
            topo.relations
        )));
    }
    if batch.seeds.is_empty() {
        return Err(ModelError::Config("batch has no seeds".into()));
    }
    let preps = prep_tables(topo, slice)?;
    let mut fp = ForwardPass::new(&bundle.store);
    let mut h_rows = Vec::with_capacity(batch.len());
    for &global in &batch.node_global {
        let (tname, row) = rgraph.locate(global)?;
        let prep = preps
            .get(tname)
            .ok_or_else(|| ModelError::Config(format!("table {tname:?} not in model topology")))?;
        let values: Vec<&Value> = prep.col_idx.iter().map(|&ci| &prep.slice.rows[row][ci]).collect();
        let e = encode_tuple(&mut fp, &topo.config, prep.topo, &values)?;
        let h0 = if tname == topo.target_table {
            if let Some(hook) = base.as_mut() {
                let repr = hook(&mut fp, row)?;
                let joined = fp.tape.concat_cols(&[repr, e])?;
                let w = fp.param("wrap.w")?;
                let b = fp.param("wrap.b")?;
                linear(&mut fp.tape, joined, w, b)?
            } else {
                e
            }
        } else {
            e
        };
        h_rows.push(h0);
    }
    let mut h = fp.tape.concat_rows(&h_rows)?;
    for l in 0..topo.config.mp_layers {
        h = message_pass_layer(&mut fp, &topo.config, l, &batch.adj, h)?;
    }
    let mut z_rows = Vec::with_capacity(batch.seeds.len());
    let mut seeds = Vec::with_capacity(batch.seeds.len());
    for &s in &batch.seeds {
        let fused = fuse_context(
            &mut fp,
            &topo.config,
            &rgraph.relations,
            &topo.target_table,
            &batch.adj,
            s,
            h,
        )?;
        z_rows.push(fused.z);
        let importance = importance_scores(&fused.alpha);
        seeds.push(SeedReport { alpha: fused.alpha, importance, slots: fused.slots });
    }
    let z = fp.tape.concat_rows(&z_rows)?;
    let output = predict_head(&mut fp, &topo.config, z)?;
    Ok(BatchOutput { fp, output, seeds })
}
