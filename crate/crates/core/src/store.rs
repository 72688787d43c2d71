//! Multi-table relational datasets on disk: a `schema.json` catalog plus one
//! RFC 4180 CSV file per table. Loading is strict about kinds and keys; the
//! slice machinery applies relational selection and projection with join keys
//! force-retained so downstream graph construction always has something to
//! join on.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profile::DataProfile;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("schema: {0}")]
    Schema(String),
    #[error("csv in table {table:?}: {detail}")]
    Csv { table: String, detail: String },
    #[error("table {table:?} row {row} column {column:?}: {detail}")]
    Parse { table: String, row: usize, column: String, detail: String },
    #[error("duplicate primary key {value:?} in table {table:?}")]
    DuplicatePk { table: String, value: String },
    #[error("null primary key in table {table:?} row {row}")]
    NullPk { table: String, row: usize },
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("unknown column {column:?} in table {table:?}")]
    UnknownColumn { table: String, column: String },
    #[error("profile: {0}")]
    Profile(String),
    #[error("target slice for table {0:?} is empty")]
    EmptyTargetSlice(String),
    #[error("split: {0}")]
    Split(String),
}

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Categorical,
    Numerical,
    Text,
    Timestamp,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FkRef {
    pub table: String,
    pub column: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pk: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fk: Option<FkRef>,
    /// Marks the event-time column used for temporal splits and the sampling
    /// leakage guard.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub timestamp_role: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableMeta {
    pub name: String,
    pub file: String,
    pub columns: Vec<ColumnMeta>,
}

impl TableMeta {
    pub fn column(&self, name: &str) -> Option<&ColumnMeta> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn pk_column(&self) -> Option<&ColumnMeta> {
        self.columns.iter().find(|c| c.pk)
    }

    /// The event-time column: the one flagged `timestamp_role`, or the single
    /// timestamp-kind column when no flag is set and there is exactly one.
    pub fn time_column(&self) -> Option<&ColumnMeta> {
        if let Some(c) = self.columns.iter().find(|c| c.timestamp_role) {
            return Some(c);
        }
        let mut ts = self.columns.iter().filter(|c| c.kind == ColumnKind::Timestamp);
        match (ts.next(), ts.next()) {
            (Some(c), None) => Some(c),
            _ => None,
        }
    }
}

/// One primary/foreign key link, child side holding the fk column.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Relation {
    pub child: String,
    pub fk_column: String,
    pub parent: String,
    pub pk_column: String,
}

impl Relation {
    /// Stable display label, also used in graph dumps and fusion slot names.
    pub fn label(&self) -> String {
        format!("{}.{}->{}", self.child, self.fk_column, self.parent)
    }

    /// The table on the far side of the relation from `table`.
    pub fn other_side<'a>(&'a self, table: &str) -> &'a str {
        if self.child == table {
            &self.parent
        } else {
            &self.child
        }
    }

    pub fn touches(&self, table: &str) -> bool {
        self.child == table || self.parent == table
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub tables: Vec<TableMeta>,
    /// Derived from fk declarations, in schema order.
    pub relations: Vec<Relation>,
}

impl Catalog {
    pub fn table(&self, name: &str) -> Option<&TableMeta> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn relations_touching<'a>(&'a self, table: &str) -> impl Iterator<Item = (usize, &'a Relation)> {
        let table = table.to_string();
        self.relations.iter().enumerate().filter(move |(_, r)| r.touches(&table))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Null,
    Cat(String),
    Num(f64),
    Text(String),
    Ts(NaiveDateTime),
}

impl Value {
    pub fn is_null(&self) -> bool {
        matches!(self, Value::Null)
    }

    /// Hashable join-key form; null keys join nothing.
    pub fn key(&self) -> Option<Key> {
        match self {
            Value::Null => None,
            Value::Cat(s) => Some(Key::Str(s.clone())),
            Value::Text(s) => Some(Key::Str(s.clone())),
            Value::Num(n) => Some(Key::Num(n.to_bits())),
            Value::Ts(t) => Some(Key::Ts(t.and_utc().timestamp_micros())),
        }
    }

    pub fn as_timestamp(&self) -> Option<NaiveDateTime> {
        match self {
            Value::Ts(t) => Some(*t),
            _ => None,
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(n) => Some(*n),
            _ => None,
        }
    }
}

impl std::fmt::Display for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Value::Null => write!(f, ""),
            Value::Cat(s) | Value::Text(s) => write!(f, "{s}"),
            Value::Num(n) => write!(f, "{n}"),
            Value::Ts(t) => write!(f, "{}", format_timestamp(*t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Key {
    Str(String),
    Num(u64),
    Ts(i64),
}

/// Canonical ISO form; lexicographic order on these strings matches
/// chronological order, which the emitted SQL relies on.
pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.f").to_string()
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.strip_suffix('Z').unwrap_or(s);
    if let Ok(t) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f") {
        return Some(t);
    }
    if let Ok(t) = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f") {
        return Some(t);
    }
    if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return d.and_hms_opt(0, 0, 0);
    }
    None
}

pub fn parse_value(raw: &str, kind: ColumnKind) -> std::result::Result<Value, String> {
    if raw.is_empty() {
        return Ok(Value::Null);
    }
    match kind {
        ColumnKind::Categorical => Ok(Value::Cat(raw.to_string())),
        ColumnKind::Text => Ok(Value::Text(raw.to_string())),
        ColumnKind::Numerical => raw
            .parse::<f64>()
            .map(Value::Num)
            .map_err(|_| format!("{raw:?} is not numerical")),
        ColumnKind::Timestamp => parse_timestamp(raw)
            .map(Value::Ts)
            .ok_or_else(|| format!("{raw:?} is not an ISO-8601 timestamp")),
    }
}

#[derive(Debug, Clone)]
pub struct Table {
    pub meta: TableMeta,
    pub rows: Vec<Vec<Value>>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IntegrityReport {
    /// Count of non-null fk values with no matching parent row, per relation
    /// label.
    pub dangling: BTreeMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub catalog: Catalog,
    pub tables: BTreeMap<String, Table>,
    pub integrity: IntegrityReport,
}

impl Dataset {
    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables.get(name).ok_or_else(|| StoreError::UnknownTable(name.to_string()))
    }
}

#[derive(Debug, Deserialize)]
struct SchemaFile {
    tables: Vec<TableMeta>,
}

/// Parse and cross-check `schema.json` without touching the CSV files.
pub fn load_catalog(dir: &Path) -> Result<Catalog> {
    let schema_path = dir.join("schema.json");
    let bytes = std::fs::read(&schema_path).map_err(|source| StoreError::Io { path: schema_path.clone(), source })?;
    let schema: SchemaFile =
        serde_json::from_slice(&bytes).map_err(|e| StoreError::Schema(format!("schema.json: {e}")))?;
    build_catalog(schema.tables)
}

fn build_catalog(tables: Vec<TableMeta>) -> Result<Catalog> {
    let mut names = HashSet::new();
    for t in &tables {
        if !names.insert(t.name.clone()) {
            return Err(StoreError::Schema(format!("duplicate table name {:?}", t.name)));
        }
        let mut cols = HashSet::new();
        let mut pk_count = 0;
        let mut role_count = 0;
        for c in &t.columns {
            if !cols.insert(c.name.clone()) {
                return Err(StoreError::Schema(format!("duplicate column {:?} in table {:?}", c.name, t.name)));
            }
            if c.pk {
                pk_count += 1;
            }
            if c.timestamp_role {
                role_count += 1;
                if c.kind != ColumnKind::Timestamp {
                    return Err(StoreError::Schema(format!(
                        "column {:?} in table {:?} has timestamp_role but kind {:?}",
                        c.name, t.name, c.kind
                    )));
                }
            }
        }
        if pk_count > 1 {
            return Err(StoreError::Schema(format!("table {:?} declares {pk_count} primary keys", t.name)));
        }
        if role_count > 1 {
            return Err(StoreError::Schema(format!("table {:?} flags {role_count} timestamp_role columns", t.name)));
        }
    }
    let mut relations = Vec::new();
    for t in &tables {
        for c in &t.columns {
            if let Some(fk) = &c.fk {
                let parent = tables
                    .iter()
                    .find(|p| p.name == fk.table)
                    .ok_or_else(|| StoreError::Schema(format!("fk {}.{} references unknown table {:?}", t.name, c.name, fk.table)))?;
                let pk_col = parent.column(&fk.column).ok_or_else(|| {
                    StoreError::Schema(format!("fk {}.{} references unknown column {}.{}", t.name, c.name, fk.table, fk.column))
                })?;
                if !pk_col.pk {
                    return Err(StoreError::Schema(format!(
                        "fk {}.{} must reference a primary key, but {}.{} is not one",
                        t.name, c.name, fk.table, fk.column
                    )));
                }
                if pk_col.kind != c.kind {
                    return Err(StoreError::Schema(format!(
                        "fk {}.{} has kind {:?} but references {:?} column {}.{}",
                        t.name, c.name, c.kind, pk_col.kind, fk.table, fk.column
                    )));
                }
                relations.push(Relation {
                    child: t.name.clone(),
                    fk_column: c.name.clone(),
                    parent: fk.table.clone(),
                    pk_column: fk.column.clone(),
                });
            }
        }
    }
    Ok(Catalog { tables, relations })
}

/// Load the catalog plus every table's CSV, checking kinds, key uniqueness
/// and fk integrity.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let catalog = load_catalog(dir)?;
    let mut tables = BTreeMap::new();
    for meta in &catalog.tables {
        let table = load_table(dir, meta)?;
        tables.insert(meta.name.clone(), table);
    }
    let mut integrity = IntegrityReport::default();
    for rel in &catalog.relations {
        let parent = &tables[&rel.parent];
        let pk_idx = parent
            .meta
            .column_index(&rel.pk_column)
            .expect("relation validated against schema");
        let keys: HashSet<Key> = parent.rows.iter().filter_map(|r| r[pk_idx].key()).collect();
        let child = &tables[&rel.child];
        let fk_idx = child.meta.column_index(&rel.fk_column).expect("relation validated against schema");
        let dangling = child
            .rows
            .iter()
            .filter_map(|r| r[fk_idx].key())
            .filter(|k| !keys.contains(k))
            .count();
        integrity.dangling.insert(rel.label(), dangling);
    }
    Ok(Dataset { dir: dir.to_path_buf(), catalog, tables, integrity })
}

fn load_table(dir: &Path, meta: &TableMeta) -> Result<Table> {
    let path = dir.join(&meta.file);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&path)
        .map_err(|e| StoreError::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| StoreError::Csv { table: meta.name.clone(), detail: e.to_string() })?
        .clone();
    let mut col_to_csv = Vec::with_capacity(meta.columns.len());
    for c in &meta.columns {
        let idx = headers.iter().position(|h| h == c.name).ok_or_else(|| StoreError::Csv {
            table: meta.name.clone(),
            detail: format!("missing column {:?} in header", c.name),
        })?;
        col_to_csv.push(idx);
    }
    if headers.len() != meta.columns.len() {
        return Err(StoreError::Csv {
            table: meta.name.clone(),
            detail: format!("header has {} columns, schema declares {}", headers.len(), meta.columns.len()),
        });
    }
    let pk_idx = meta.columns.iter().position(|c| c.pk);
    let mut seen_pks: HashSet<Key> = HashSet::new();
    let mut rows = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| StoreError::Csv { table: meta.name.clone(), detail: e.to_string() })?;
        let mut row = Vec::with_capacity(meta.columns.len());
        for (c, &csv_idx) in meta.columns.iter().zip(&col_to_csv) {
            let raw = record.get(csv_idx).unwrap_or("");
            let value = parse_value(raw, c.kind).map_err(|detail| StoreError::Parse {
                table: meta.name.clone(),
                row: row_no + 1,
                column: c.name.clone(),
                detail,
            })?;
            row.push(value);
        }
        if let Some(pk) = pk_idx {
            match row[pk].key() {
                None => return Err(StoreError::NullPk { table: meta.name.clone(), row: row_no + 1 }),
                Some(key) => {
                    if !seen_pks.insert(key) {
                        return Err(StoreError::DuplicatePk {
                            table: meta.name.clone(),
                            value: row[pk].to_string(),
                        });
                    }
                }
            }
        }
        rows.push(row);
    }
    Ok(Table { meta: meta.clone(), rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PredOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "in")]
    In,
}

/// A typed, compiled filter. Null column values fail every operator,
/// including `!=` and `in`, mirroring SQL three-valued logic under WHERE.
#[derive(Debug, Clone)]
pub struct Predicate {
    pub column: String,
    pub op: PredOp,
    pub literals: Vec<Value>,
}

impl Predicate {
    pub fn eval(&self, v: &Value) -> bool {
        if v.is_null() {
            return false;
        }
        match self.op {
            PredOp::Eq => self.literals.first().is_some_and(|l| values_eq(v, l)),
            PredOp::Ne => self.literals.first().is_some_and(|l| !values_eq(v, l)),
            PredOp::In => self.literals.iter().any(|l| values_eq(v, l)),
            PredOp::Lt | PredOp::Le | PredOp::Gt | PredOp::Ge => {
                let Some(l) = self.literals.first() else { return false };
                let Some(ord) = values_cmp(v, l) else { return false };
                matches!(
                    (self.op, ord),
                    (PredOp::Lt, std::cmp::Ordering::Less)
                        | (PredOp::Le, std::cmp::Ordering::Less | std::cmp::Ordering::Equal)
                        | (PredOp::Gt, std::cmp::Ordering::Greater)
                        | (PredOp::Ge, std::cmp::Ordering::Greater | std::cmp::Ordering::Equal)
                )
            }
        }
    }
}

fn values_eq(a: &Value, b: &Value) -> bool {
    values_cmp(a, b) == Some(std::cmp::Ordering::Equal)
}

fn values_cmp(a: &Value, b: &Value) -> Option<std::cmp::Ordering> {
    match (a, b) {
        (Value::Num(x), Value::Num(y)) => x.partial_cmp(y),
        (Value::Cat(x), Value::Cat(y)) | (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        (Value::Ts(x), Value::Ts(y)) => Some(x.cmp(y)),
        _ => None,
    }
}

/// Parse a JSON literal against a column kind.
pub fn literal_from_json(v: &serde_json::Value, kind: ColumnKind) -> std::result::Result<Value, String> {
    match (kind, v) {
        (ColumnKind::Numerical, serde_json::Value::Number(n)) => {
            n.as_f64().map(Value::Num).ok_or_else(|| format!("{n} is not representable as f64"))
        }
        (ColumnKind::Categorical, serde_json::Value::String(s)) => Ok(Value::Cat(s.clone())),
        (ColumnKind::Text, serde_json::Value::String(s)) => Ok(Value::Text(s.clone())),
        (ColumnKind::Timestamp, serde_json::Value::String(s)) => {
            parse_timestamp(s).map(Value::Ts).ok_or_else(|| format!("{s:?} is not an ISO-8601 timestamp"))
        }
        (kind, other) => Err(format!("literal {other} does not fit column kind {kind:?}")),
    }
}

#[derive(Debug, Clone)]
pub struct SliceTable {
    pub name: String,
    /// Retained columns, in schema order.
    pub columns: Vec<ColumnMeta>,
    pub rows: Vec<Vec<Value>>,
    /// Original row indices in the loaded table, for provenance.
    pub source_rows: Vec<usize>,
    pub pk_idx: Option<usize>,
    pub ts_idx: Option<usize>,
}

impl SliceTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn timestamp(&self, row: usize) -> Option<NaiveDateTime> {
        self.ts_idx.and_then(|i| self.rows[row][i].as_timestamp())
    }

    pub fn pk(&self, row: usize) -> Option<&Value> {
        self.pk_idx.map(|i| &self.rows[row][i])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TableProvenance {
    pub table: String,
    pub retained: Vec<String>,
    /// Join/key columns added beyond the profile's own list.
    pub forced: Vec<String>,
    pub predicates: usize,
    pub rows_in: usize,
    pub rows_out: usize,
}

#[derive(Debug, Clone)]
pub struct DataSlice {
    pub target_table: String,
    pub tables: BTreeMap<String, SliceTable>,
    pub provenance: Vec<TableProvenance>,
}

impl DataSlice {
    pub fn table(&self, name: &str) -> Result<&SliceTable> {
        self.tables.get(name).ok_or_else(|| StoreError::UnknownTable(name.to_string()))
    }

    pub fn target(&self) -> &SliceTable {
        &self.tables[&self.target_table]
    }
}

/// Per-table execution plan shared by slice extraction and SQL emission:
/// which columns survive projection and which compiled predicates filter the
/// rows.
#[derive(Debug, Clone)]
pub struct TablePlan {
    pub table: String,
    pub retained: Vec<ColumnMeta>,
    pub forced: Vec<String>,
    pub predicates: Vec<Predicate>,
}

/// Resolve a data profile against the catalog. Primary keys are always
/// retained; fk/pk columns of the listed join paths are force-retained.
pub fn plan_slice(catalog: &Catalog, profile: &DataProfile) -> Result<Vec<TablePlan>> {
    if !profile.tables.iter().any(|t| t.name == profile.target_table) {
        return Err(StoreError::Profile(format!(
            "target table {:?} is not listed in the profile",
            profile.target_table
        )));
    }
    // Columns that must survive projection because a join path needs them.
    let mut forced: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
    for jp in &profile.join_paths {
        let rel = catalog
            .relations
            .iter()
            .find(|r| r.child == jp.child && r.fk_column == jp.fk && r.parent == jp.parent)
            .ok_or_else(|| {
                StoreError::Profile(format!("join path {}.{}->{} is not a catalog relation", jp.child, jp.fk, jp.parent))
            })?;
        forced.entry(rel.child.as_str()).or_default().insert(rel.fk_column.as_str());
        forced.entry(rel.parent.as_str()).or_default().insert(rel.pk_column.as_str());
    }

    let mut plans = Vec::with_capacity(profile.tables.len());
    for spec in &profile.tables {
        let meta = catalog.table(&spec.name).ok_or_else(|| StoreError::UnknownTable(spec.name.clone()))?;
        for c in &spec.columns {
            if meta.column(c).is_none() {
                return Err(StoreError::UnknownColumn { table: spec.name.clone(), column: c.clone() });
            }
        }
        let mut keep: HashSet<&str> = spec.columns.iter().map(|s| s.as_str()).collect();
        let mut forced_cols: Vec<String> = Vec::new();
        if let Some(extra) = forced.get(spec.name.as_str()) {
            for &c in extra {
                if keep.insert(c) {
                    forced_cols.push(c.to_string());
                }
            }
        }
        if let Some(pk) = meta.pk_column() {
            if keep.insert(pk.name.as_str()) {
                forced_cols.push(pk.name.clone());
            }
        }
        forced_cols.sort();
        let predicates = compile_predicates(meta, &spec.filters, &keep)?;
        let retained: Vec<ColumnMeta> =
            meta.columns.iter().filter(|c| keep.contains(c.name.as_str())).cloned().collect();
        plans.push(TablePlan { table: spec.name.clone(), retained, forced: forced_cols, predicates });
    }
    Ok(plans)
}

/// Apply a data profile: per-table predicate conjunctions, then column
/// projection per [`plan_slice`].
pub fn extract_slice(dataset: &Dataset, profile: &DataProfile) -> Result<DataSlice> {
    let plans = plan_slice(&dataset.catalog, profile)?;
    let mut tables = BTreeMap::new();
    let mut provenance = Vec::new();
    for plan in &plans {
        let table = dataset.table(&plan.table)?;
        let meta = &table.meta;
        let retained_idx: Vec<usize> = plan
            .retained
            .iter()
            .map(|c| meta.column_index(&c.name).expect("planned columns exist"))
            .collect();
        let pred_idx: Vec<(usize, &Predicate)> = plan
            .predicates
            .iter()
            .map(|p| (meta.column_index(&p.column).expect("planned columns exist"), p))
            .collect();

        let mut rows = Vec::new();
        let mut source_rows = Vec::new();
        for (i, row) in table.rows.iter().enumerate() {
            if pred_idx.iter().all(|(ci, p)| p.eval(&row[*ci])) {
                rows.push(retained_idx.iter().map(|&ci| row[ci].clone()).collect());
                source_rows.push(i);
            }
        }
        provenance.push(TableProvenance {
            table: plan.table.clone(),
            retained: plan.retained.iter().map(|c| c.name.clone()).collect(),
            forced: plan.forced.clone(),
            predicates: plan.predicates.len(),
            rows_in: table.rows.len(),
            rows_out: rows.len(),
        });
        let pk_idx = plan.retained.iter().position(|c| c.pk);
        let ts_idx = meta.time_column().and_then(|tc| plan.retained.iter().position(|c| c.name == tc.name));
        tables.insert(
            plan.table.clone(),
            SliceTable {
                name: plan.table.clone(),
                columns: plan.retained.clone(),
                rows,
                source_rows,
                pk_idx,
                ts_idx,
            },
        );
    }
    if tables[&profile.target_table].rows.is_empty() {
        return Err(StoreError::EmptyTargetSlice(profile.target_table.clone()));
    }
    Ok(DataSlice { target_table: profile.target_table.clone(), tables, provenance })
}

/// Resolve a profile's filter specs against the table schema. Predicates may
/// only reference columns that survive projection.
pub fn compile_predicates(
    meta: &TableMeta,
    filters: &[crate::profile::FilterSpec],
    retained: &HashSet<&str>,
) -> Result<Vec<Predicate>> {
    let mut out = Vec::with_capacity(filters.len());
    for f in filters {
        let col = meta.column(&f.column).ok_or_else(|| StoreError::UnknownColumn {
            table: meta.name.clone(),
            column: f.column.clone(),
        })?;
        if !retained.contains(f.column.as_str()) {
            return Err(StoreError::Profile(format!(
                "predicate on {}.{} references a projected-away column",
                meta.name, f.column
            )));
        }
        let raw: Vec<&serde_json::Value> = match (&f.value, &f.values) {
            (Some(v), None) => vec![v],
            (None, Some(vs)) if f.op == PredOp::In => vs.iter().collect(),
            (None, Some(_)) => {
                return Err(StoreError::Profile(format!(
                    "predicate on {}.{} uses a value list with a non-in operator",
                    meta.name, f.column
                )))
            }
            _ => {
                return Err(StoreError::Profile(format!(
                    "predicate on {}.{} needs exactly one of value/values",
                    meta.name, f.column
                )))
            }
        };
        if f.op == PredOp::In && raw.is_empty() {
            return Err(StoreError::Profile(format!("empty in-list on {}.{}", meta.name, f.column)));
        }
        let literals = raw
            .into_iter()
            .map(|v| literal_from_json(v, col.kind))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| StoreError::Profile(format!("predicate on {}.{}: {e}", meta.name, f.column)))?;
        out.push(Predicate { column: f.column.clone(), op: f.op, literals });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSets {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Labeled rows that could not be placed because their timestamp is null.
    pub skipped: usize,
}

/// Chronological three-way split of the target table's labeled rows:
/// train up to and including `train_cutoff`, valid up to and including
/// `valid_cutoff`, test after that.
pub fn temporal_split(
    slice: &DataSlice,
    label_column: Option<&str>,
    train_cutoff: NaiveDateTime,
    valid_cutoff: NaiveDateTime,
) -> Result<SplitSets> {
    if train_cutoff >= valid_cutoff {
        return Err(StoreError::Split(format!(
            "train cutoff {} must precede valid cutoff {}",
            format_timestamp(train_cutoff),
            format_timestamp(valid_cutoff)
        )));
    }
    let target = slice.target();
    if target.ts_idx.is_none() {
        return Err(StoreError::Split(format!(
            "table {:?} has no timestamp column to split on",
            target.name
        )));
    }
    let label_idx = match label_column {
        Some(name) => Some(
            target
                .column_index(name)
                .ok_or_else(|| StoreError::UnknownColumn { table: target.name.clone(), column: name.to_string() })?,
        ),
        None => None,
    };
    let mut sets = SplitSets::default();
    for i in 0..target.rows.len() {
        if let Some(li) = label_idx {
            if target.rows[i][li].is_null() {
                continue;
            }
        }
        match target.timestamp(i) {
            None => sets.skipped += 1,
            Some(ts) => {
                if ts <= train_cutoff {
                    sets.train.push(i);
                } else if ts <= valid_cutoff {
                    sets.valid.push(i);
                } else {
                    sets.test.push(i);
                }
            }
        }
    }
    Ok(sets)
}
