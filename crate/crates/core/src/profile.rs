//! Task and data profiles: what to predict, and which slice of the dataset
//! feeds the model. Profiles arrive as JSON (hand-written or produced by the
//! agent client) and are validated against the catalog before anything runs;
//! a deterministic deriver builds a data profile by walking the key graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{Catalog, ColumnKind, Dataset, PredOp, StoreError, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile json: {0}")]
    Json(String),
    #[error("invalid profile: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Store(#[from] StoreError),
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

pub type Result<T> = std::result::Result<T, ProfileError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classification,
    Regression,
}

impl TaskType {
    pub fn name(self) -> &'static str {
        match self {
            TaskType::Classification => "classification",
            TaskType::Regression => "regression",
        }
    }
}

/// What to predict: target table/column, task kind, and optionally how far
/// ahead the label looks and how it was constructed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskProfile {
    pub task_name: String,
    pub task_type: TaskType,
    pub target_table: String,
    pub target_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_horizon: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_rule: Option<String>,
}

impl TaskProfile {
    /// Short stable identifier binding dispatcher statistics to a task shape.
    pub fn signature(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.task_name.as_bytes());
        h.update([0]);
        h.update(self.target_table.as_bytes());
        h.update([0]);
        h.update(self.target_column.as_bytes());
        h.update([0]);
        h.update(self.task_type.name().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// A prediction horizon like `7d`, `24h` or `2w`.
pub fn parse_horizon(s: &str) -> Option<chrono::Duration> {
    let (num, unit) = s.split_at(s.len().checked_sub(1)?);
    let n: i64 = num.parse().ok()?;
    if n <= 0 {
        return None;
    }
    match unit {
        "h" => Some(chrono::Duration::hours(n)),
        "d" => Some(chrono::Duration::days(n)),
        "w" => Some(chrono::Duration::weeks(n)),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FilterSpec {
    pub column: String,
    pub op: PredOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<serde_json::Value>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TableSpec {
    pub name: String,
    pub columns: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub filters: Vec<FilterSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct JoinPath {
    pub child: String,
    pub fk: String,
    pub parent: String,
}

/// Which tables, columns, filters and join paths make up the working slice.
/// Table order is meaningful and preserved.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DataProfile {
    pub target_table: String,
    pub tables: Vec<TableSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub join_paths: Vec<JoinPath>,
}

/// Parse and validate a task profile from JSON. All violations are collected
/// rather than stopping at the first.
pub fn validate_task_profile(json: &serde_json::Value, catalog: &Catalog) -> Result<TaskProfile> {
    let profile: TaskProfile =
        serde_json::from_value(json.clone()).map_err(|e| ProfileError::Json(e.to_string()))?;
    let mut violations = Vec::new();
    if profile.task_name.is_empty() {
        violations.push(Violation { field: "task_name".into(), message: "must not be empty".into() });
    }
    match catalog.table(&profile.target_table) {
        None => violations.push(Violation {
            field: "target_table".into(),
            message: format!("unknown table {:?}", profile.target_table),
        }),
        Some(meta) => match meta.column(&profile.target_column) {
            None => violations.push(Violation {
                field: "target_column".into(),
                message: format!("unknown column {:?} in table {:?}", profile.target_column, profile.target_table),
            }),
            Some(col) => {
                let ok = match profile.task_type {
                    TaskType::Classification => {
                        matches!(col.kind, ColumnKind::Categorical | ColumnKind::Numerical)
                    }
                    TaskType::Regression => col.kind == ColumnKind::Numerical,
                };
                if !ok {
                    violations.push(Violation {
                        field: "task_type".into(),
                        message: format!(
                            "{} task cannot use {:?} label column {:?}",
                            profile.task_type.name(),
                            col.kind,
                            profile.target_column
                        ),
                    });
                }
            }
        },
    }
    if let Some(h) = &profile.prediction_horizon {
        if parse_horizon(h).is_none() {
            violations.push(Violation {
                field: "prediction_horizon".into(),
                message: format!("{h:?} is not of the form <n><h|d|w>"),
            });
        }
    }
    if let Some(rule) = &profile.label_rule {
        if rule.trim().is_empty() {
            violations.push(Violation { field: "label_rule".into(), message: "must not be empty".into() });
        }
    }
    if violations.is_empty() {
        Ok(profile)
    } else {
        Err(ProfileError::Invalid(violations))
    }
}

/// Parse and validate a data profile: tables and columns must exist, join
/// paths must be catalog relations, and every listed table must be reachable
/// from the target through them.
pub fn validate_data_profile(json: &serde_json::Value, catalog: &Catalog) -> Result<DataProfile> {
    let profile: DataProfile =
        serde_json::from_value(json.clone()).map_err(|e| ProfileError::Json(e.to_string()))?;
    let mut violations = Vec::new();
    let mut listed = BTreeSet::new();
    for t in &profile.tables {
        if !listed.insert(t.name.clone()) {
            violations.push(Violation {
                field: "tables".into(),
                message: format!("table {:?} listed twice", t.name),
            });
        }
        match catalog.table(&t.name) {
            None => violations.push(Violation {
                field: "tables".into(),
                message: format!("unknown table {:?}", t.name),
            }),
            Some(meta) => {
                for c in &t.columns {
                    if meta.column(c).is_none() {
                        violations.push(Violation {
                            field: format!("tables.{}", t.name),
                            message: format!("unknown column {c:?}"),
                        });
                    }
                }
            }
        }
    }
    if !listed.contains(&profile.target_table) {
        violations.push(Violation {
            field: "target_table".into(),
            message: format!("{:?} is not among the listed tables", profile.target_table),
        });
    }
    for jp in &profile.join_paths {
        let known = catalog
            .relations
            .iter()
            .any(|r| r.child == jp.child && r.fk_column == jp.fk && r.parent == jp.parent);
        if !known {
            violations.push(Violation {
                field: "join_paths".into(),
                message: format!("{}.{}->{} is not a catalog relation", jp.child, jp.fk, jp.parent),
            });
        }
    }
    // Reachability over the declared join paths, ignoring direction.
    let mut adj: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for jp in &profile.join_paths {
        adj.entry(jp.child.as_str()).or_default().push(jp.parent.as_str());
        adj.entry(jp.parent.as_str()).or_default().push(jp.child.as_str());
    }
    let mut seen = BTreeSet::new();
    let mut queue = VecDeque::new();
    seen.insert(profile.target_table.as_str());
    queue.push_back(profile.target_table.as_str());
    while let Some(t) = queue.pop_front() {
        for &n in adj.get(t).into_iter().flatten() {
            if seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    for t in &profile.tables {
        if t.name != profile.target_table && !seen.contains(t.name.as_str()) {
            violations.push(Violation {
                field: format!("tables.{}", t.name),
                message: "not reachable from the target via the listed join paths".into(),
            });
        }
    }
    if violations.is_empty() {
        Ok(profile)
    } else {
        Err(ProfileError::Invalid(violations))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DeriveConfig {
    /// Key-graph distance from the target table to include.
    pub max_hops: usize,
    /// Text columns whose longest value exceeds this are dropped.
    pub text_limit: usize,
}

impl Default for DeriveConfig {
    fn default() -> Self {
        DeriveConfig { max_hops: 2, text_limit: 256 }
    }
}

/// Deterministic profile derivation: breadth-first over key relations from
/// the target, keeping every column except over-long free text. The output
/// does not depend on catalog table order.
pub fn derive_data_profile(
    task: &TaskProfile,
    dataset: &Dataset,
    cfg: &DeriveConfig,
) -> Result<(DataProfile, Vec<String>)> {
    let catalog = &dataset.catalog;
    if catalog.table(&task.target_table).is_none() {
        return Err(ProfileError::Invalid(vec![Violation {
            field: "target_table".into(),
            message: format!("unknown table {:?}", task.target_table),
        }]));
    }
    let mut warnings = Vec::new();
    let mut reach: BTreeSet<String> = BTreeSet::new();
    reach.insert(task.target_table.clone());
    let mut order = vec![task.target_table.clone()];
    let mut frontier = vec![task.target_table.clone()];
    for _ in 0..cfg.max_hops {
        let mut next: BTreeSet<String> = BTreeSet::new();
        for t in &frontier {
            for (_, rel) in catalog.relations_touching(t) {
                let other = rel.other_side(t).to_string();
                if !reach.contains(&other) {
                    next.insert(other);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        // BTreeSet iteration makes each hop's ordering alphabetical.
        for t in next {
            reach.insert(t.clone());
            order.push(t.clone());
            frontier.push(t);
        }
        frontier = order.clone();
    }
    if order.len() == 1 && cfg.max_hops > 0 && !catalog.relations.is_empty() {
        warnings.push(format!("table {:?} has no relations; the profile covers only the target table", task.target_table));
    }
    if catalog.relations.is_empty() {
        warnings.push("catalog declares no relations; the profile covers only the target table".into());
    }

    let mut tables = Vec::with_capacity(order.len());
    for name in &order {
        let table = dataset.table(name)?;
        let mut columns = Vec::new();
        for (ci, col) in table.meta.columns.iter().enumerate() {
            if col.kind == ColumnKind::Text && !col.pk && col.fk.is_none() {
                let longest = table
                    .rows
                    .iter()
                    .map(|r| match &r[ci] {
                        Value::Text(s) => s.chars().count(),
                        _ => 0,
                    })
                    .max()
                    .unwrap_or(0);
                if longest > cfg.text_limit {
                    warnings.push(format!(
                        "dropped text column {}.{} (longest value {} exceeds {})",
                        name, col.name, longest, cfg.text_limit
                    ));
                    continue;
                }
            }
            columns.push(col.name.clone());
        }
        tables.push(TableSpec { name: name.clone(), columns, filters: vec![] });
    }
    let mut join_paths: Vec<JoinPath> = catalog
        .relations
        .iter()
        .filter(|r| reach.contains(&r.child) && reach.contains(&r.parent))
        .map(|r| JoinPath { child: r.child.clone(), fk: r.fk_column.clone(), parent: r.parent.clone() })
        .collect();
    join_paths.sort_by(|a, b| (&a.child, &a.fk, &a.parent).cmp(&(&b.child, &b.fk, &b.parent)));
    Ok((DataProfile { target_table: task.target_table.clone(), tables, join_paths }, warnings))
}

fn sql_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

fn sql_literal(v: &Value) -> String {
    match v {
        Value::Null => "NULL".into(),
        Value::Num(n) => format!("{n}"),
        Value::Cat(s) | Value::Text(s) => format!("'{}'", s.replace('\'', "''")),
        Value::Ts(t) => format!("'{}'", crate::store::format_timestamp(*t)),
    }
}

/// One `SELECT retained FROM table WHERE conjunction` per profile table, in
/// profile order, for re-execution on an external SQL engine. Timestamps are
/// rendered in the same canonical text form the CSV loader normalizes to, so
/// string comparison in SQL agrees with chronological order.
pub fn emit_sql_fragments(catalog: &Catalog, profile: &DataProfile) -> Result<Vec<String>> {
    let plans = crate::store::plan_slice(catalog, profile)?;
    let mut out = Vec::with_capacity(plans.len());
    for plan in &plans {
        let cols = plan.retained.iter().map(|c| sql_ident(&c.name)).collect::<Vec<_>>().join(", ");
        let mut sql = format!("SELECT {cols} FROM {}", sql_ident(&plan.table));
        if !plan.predicates.is_empty() {
            let conds = plan
                .predicates
                .iter()
                .map(|p| {
                    let col = sql_ident(&p.column);
                    match p.op {
                        PredOp::Eq => format!("{col} = {}", sql_literal(&p.literals[0])),
                        PredOp::Ne => format!("{col} <> {}", sql_literal(&p.literals[0])),
                        PredOp::Lt => format!("{col} < {}", sql_literal(&p.literals[0])),
                        PredOp::Le => format!("{col} <= {}", sql_literal(&p.literals[0])),
                        PredOp::Gt => format!("{col} > {}", sql_literal(&p.literals[0])),
                        PredOp::Ge => format!("{col} >= {}", sql_literal(&p.literals[0])),
                        PredOp::In => {
                            let items =
                                p.literals.iter().map(sql_literal).collect::<Vec<_>>().join(", ");
                            format!("{col} IN ({items})")
                        }
                    }
                })
                .collect::<Vec<_>>()
                .join(" AND ");
            sql.push_str(" WHERE ");
            sql.push_str(&conds);
        }
        out.push(sql);
    }
    Ok(out)
}

/// Compact catalog description handed to the agent for natural-language task
/// parsing.
pub fn catalog_summary(catalog: &Catalog) -> serde_json::Value {
    serde_json::json!({
        "tables": catalog.tables.iter().map(|t| serde_json::json!({
            "name": t.name,
            "columns": t.columns.iter().map(|c| serde_json::json!({
                "name": c.name,
                "kind": c.kind,
                "pk": c.pk,
                "fk": c.fk.as_ref().map(|f| format!("{}.{}", f.table, f.column)),
            })).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
        "relations": catalog.relations.iter().map(|r| r.label()).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::load_dataset;
    use serde_json::json;

    fn demo_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("schema.json"),
            json!({"tables": [
                {"name": "users", "file": "users.csv", "columns": [
                    {"name": "id", "kind": "categorical", "pk": true},
                    {"name": "churned", "kind": "numerical"},
                    {"name": "note", "kind": "text"},
                    {"name": "joined", "kind": "timestamp", "timestamp_role": true}
                ]},
                {"name": "orders", "file": "orders.csv", "columns": [
                    {"name": "oid", "kind": "categorical", "pk": true},
                    {"name": "user_id", "kind": "categorical", "fk": {"table": "users", "column": "id"}},
                    {"name": "amount", "kind": "numerical"}
                ]},
                {"name": "items", "file": "items.csv", "columns": [
                    {"name": "iid", "kind": "categorical", "pk": true},
                    {"name": "order_id", "kind": "categorical", "fk": {"table": "orders", "column": "oid"}},
                    {"name": "price", "kind": "numerical"}
                ]},
                {"name": "lonely", "file": "lonely.csv", "columns": [
                    {"name": "lid", "kind": "categorical", "pk": true}
                ]}
            ]})
            .to_string(),
        )
        .unwrap();
        let long_note = "x".repeat(300);
        std::fs::write(
            dir.path().join("users.csv"),
            format!("id,churned,note,joined\nu1,0,{long_note},2024-01-01\nu2,1,short,2024-01-02\n"),
        )
        .unwrap();
        std::fs::write(dir.path().join("orders.csv"), "oid,user_id,amount\no1,u1,5\no2,u2,7\n").unwrap();
        std::fs::write(dir.path().join("items.csv"), "iid,order_id,price\ni1,o1,2.5\n").unwrap();
        std::fs::write(dir.path().join("lonely.csv"), "lid\nl1\n").unwrap();
        dir
    }

    fn task_json() -> serde_json::Value {
        json!({
            "task_name": "churn",
            "task_type": "classification",
            "target_table": "users",
            "target_column": "churned"
        })
    }

    #[test]
    fn valid_task_profile_round_trips() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let task = validate_task_profile(&task_json(), &ds.catalog).unwrap();
        assert_eq!(task.task_type, TaskType::Classification);
        assert_eq!(task.signature().len(), 16);
    }

    #[test]
    fn unknown_column_and_kind_mismatch_are_reported_with_fields() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let mut bad = task_json();
        bad["target_column"] = json!("nope");
        match validate_task_profile(&bad, &ds.catalog).unwrap_err() {
            ProfileError::Invalid(vs) => {
                assert!(vs.iter().any(|v| v.field == "target_column"));
            }
            other => panic!("unexpected {other:?}"),
        }
        // Regression against a text column is a kind mismatch.
        let mut bad = task_json();
        bad["task_type"] = json!("regression");
        bad["target_column"] = json!("note");
        match validate_task_profile(&bad, &ds.catalog).unwrap_err() {
            ProfileError::Invalid(vs) => {
                assert!(vs.iter().any(|v| v.field == "task_type"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_horizon_is_a_violation() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let mut bad = task_json();
        bad["prediction_horizon"] = json!("seven days");
        assert!(validate_task_profile(&bad, &ds.catalog).is_err());
        let mut ok = task_json();
        ok["prediction_horizon"] = json!("7d");
        assert!(validate_task_profile(&ok, &ds.catalog).is_ok());
    }

    #[test]
    fn derive_walks_hops_and_drops_long_text() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let task = validate_task_profile(&task_json(), &ds.catalog).unwrap();
        let (profile, warnings) = derive_data_profile(&task, &ds, &DeriveConfig::default()).unwrap();
        let names: Vec<&str> = profile.tables.iter().map(|t| t.name.as_str()).collect();
        // Two hops from users: orders at hop 1, items at hop 2; lonely is unreachable.
        assert_eq!(names, vec!["users", "orders", "items"]);
        assert!(!profile.tables[0].columns.contains(&"note".to_string()));
        assert!(warnings.iter().any(|w| w.contains("note")));
        assert_eq!(profile.join_paths.len(), 2);
        // One hop stops at orders.
        let (short, _) = derive_data_profile(&task, &ds, &DeriveConfig { max_hops: 1, text_limit: 256 }).unwrap();
        let names: Vec<&str> = short.tables.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["users", "orders"]);
    }

    #[test]
    fn derive_is_invariant_to_catalog_table_order() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let task = validate_task_profile(&task_json(), &ds.catalog).unwrap();
        let (a, _) = derive_data_profile(&task, &ds, &DeriveConfig::default()).unwrap();
        let mut shuffled = ds.clone();
        shuffled.catalog.tables.reverse();
        shuffled.catalog.relations.reverse();
        let (b, _) = derive_data_profile(&task, &shuffled, &DeriveConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn derived_profile_validates() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let task = validate_task_profile(&task_json(), &ds.catalog).unwrap();
        let (profile, _) = derive_data_profile(&task, &ds, &DeriveConfig::default()).unwrap();
        let round = serde_json::to_value(&profile).unwrap();
        assert!(validate_data_profile(&round, &ds.catalog).is_ok());
    }

    #[test]
    fn unreachable_table_is_a_validation_error() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let profile = json!({
            "target_table": "users",
            "tables": [
                {"name": "users", "columns": ["id"]},
                {"name": "lonely", "columns": ["lid"]}
            ],
            "join_paths": []
        });
        match validate_data_profile(&profile, &ds.catalog).unwrap_err() {
            ProfileError::Invalid(vs) => {
                assert!(vs.iter().any(|v| v.message.contains("not reachable")));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sql_fragments_quote_and_escape() {
        let dir = demo_dir();
        let ds = load_dataset(dir.path()).unwrap();
        let profile = DataProfile {
            target_table: "users".into(),
            tables: vec![TableSpec {
                name: "users".into(),
                columns: vec!["id".into(), "churned".into()],
                filters: vec![
                    FilterSpec {
                        column: "id".into(),
                        op: PredOp::In,
                        value: None,
                        values: Some(vec![json!("u1"), json!("o'brien")]),
                    },
                    FilterSpec { column: "churned".into(), op: PredOp::Ne, value: Some(json!(1.0)), values: None },
                ],
            }],
            join_paths: vec![],
        };
        let frags = emit_sql_fragments(&ds.catalog, &profile).unwrap();
        assert_eq!(frags.len(), 1);
        assert_eq!(
            frags[0],
            "SELECT \"id\", \"churned\" FROM \"users\" WHERE \"id\" IN ('u1', 'o''brien') AND \"churned\" <> 1"
        );
    }
}
