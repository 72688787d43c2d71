//! Deterministic synthetic relational benchmarks. The generator controls
//! where the label signal lives: in the target row itself, or only in a
//! child-table aggregate. The second placement makes relational lift
//! measurable by construction, because a target-only model has nothing but
//! noise to learn from.

use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::profile::{DataProfile, JoinPath, TableSpec, TaskType};
use crate::store::format_timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalPlacement {
    /// The label is a function of one target-table column.
    TargetOnly,
    /// The label is a function of the sum of child-table values visible at
    /// the target row's reference time; target columns are pure noise.
    NeighborAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub users: usize,
    pub min_orders: usize,
    pub max_orders: usize,
    /// Adds a second child table carrying no signal, for two-relation
    /// schemas.
    pub extra_relation: bool,
    pub signal: SignalPlacement,
    pub task: TaskType,
    /// Fraction of child events stamped after their user's reference time.
    /// Those events never contribute to the label.
    pub future_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 300,
            min_orders: 2,
            max_orders: 5,
            extra_relation: false,
            signal: SignalPlacement::NeighborAggregate,
            task: TaskType::Classification,
            future_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub schema: serde_json::Value,
    /// (file name, CSV text) pairs referenced by the schema.
    pub files: Vec<(String, String)>,
    pub task_profile: serde_json::Value,
    pub data_profile: DataProfile,
    /// Reference-time cutoffs hitting roughly 60/20/20 splits.
    pub train_cutoff: NaiveDateTime,
    pub valid_cutoff: NaiveDateTime,
}

impl SynthDataset {
    pub fn write_to_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("schema.json"), self.schema.to_string())?;
        for (name, text) in &self.files {
            std::fs::write(dir.join(name), text)?;
        }
        std::fs::write(dir.join("task.json"), self.task_profile.to_string())?;
        Ok(())
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Strict-median threshold: for an even count of distinct scores, exactly
/// half the rows land above it.
fn median(scores: &[f64]) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = sorted.len();
    if n % 2 == 0 {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    } else {
        sorted[n / 2]
    }
}

pub fn generate(cfg: &SynthConfig) -> SynthDataset {
    assert!(cfg.users >= 2, "need at least two target rows");
    assert!(cfg.min_orders <= cfg.max_orders, "order count range is inverted");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap().and_hms_opt(8, 0, 0).unwrap();

    // Reference times spread evenly over a year, monotone in the row index,
    // so quantile cutoffs give exact split fractions.
    let signup: Vec<NaiveDateTime> = (0..cfg.users)
        .map(|i| base + Duration::days((i as i64 * 364) / (cfg.users as i64 - 1).max(1)))
        .collect();
    let own_signal: Vec<f64> = (0..cfg.users).map(|_| round6(rng.random_range(-1.0..1.0))).collect();
    let noise: Vec<f64> = (0..cfg.users).map(|_| round6(rng.random_range(-1.0..1.0))).collect();
    let cities = ["north", "south", "east", "west"];
    let city: Vec<&str> = (0..cfg.users).map(|_| cities[rng.random_range(0..cities.len())]).collect();

    struct Order {
        user: usize,
        value: f64,
        ts: NaiveDateTime,
    }
    let mut orders = Vec::new();
    for u in 0..cfg.users {
        let k = rng.random_range(cfg.min_orders..=cfg.max_orders);
        for _ in 0..k {
            let value = round6(rng.random_range(-1.0..1.0));
            let days = rng.random_range(1..120i64);
            let ts = if rng.random::<f64>() < cfg.future_fraction {
                signup[u] + Duration::days(days)
            } else {
                signup[u] - Duration::days(days)
            };
            orders.push(Order { user: u, value, ts });
        }
    }

    let scores: Vec<f64> = match cfg.signal {
        SignalPlacement::TargetOnly => own_signal.clone(),
        SignalPlacement::NeighborAggregate => {
            let mut sums = vec![0.0; cfg.users];
            for o in &orders {
                if o.ts <= signup[o.user] {
                    sums[o.user] += o.value;
                }
            }
            sums
        }
    };
    let labels: Vec<f64> = match cfg.task {
        TaskType::Classification => {
            let m = median(&scores);
            scores.iter().map(|&s| f64::from(s > m)).collect()
        }
        TaskType::Regression => {
            let max_abs = scores.iter().fold(0.0f64, |a, &s| a.max(s.abs())).max(1e-9);
            scores.iter().map(|&s| round6(s / max_abs)).collect()
        }
    };

    let mut users_csv = String::from("id,noise,city,signup,label\n");
    for u in 0..cfg.users {
        let label = match cfg.task {
            TaskType::Classification => format!("{}", labels[u] as i64),
            TaskType::Regression => format!("{:.6}", labels[u]),
        };
        users_csv.push_str(&format!(
            "u{u:04},{:.6},{},{},{label}\n",
            noise[u],
            city[u],
            format_timestamp(signup[u])
        ));
    }
    let mut orders_csv = String::from("oid,user_id,value,placed\n");
    for (i, o) in orders.iter().enumerate() {
        orders_csv.push_str(&format!(
            "o{i:05},u{:04},{:.6},{}\n",
            o.user,
            o.value,
            format_timestamp(o.ts)
        ));
    }

    let mut tables = vec![
        json!({"name": "users", "file": "users.csv", "columns": [
            {"name": "id", "kind": "categorical", "pk": true},
            {"name": "noise", "kind": "numerical"},
            {"name": "city", "kind": "categorical"},
            {"name": "signup", "kind": "timestamp", "timestamp_role": true},
            {"name": "label", "kind": "numerical"}
        ]}),
        json!({"name": "orders", "file": "orders.csv", "columns": [
            {"name": "oid", "kind": "categorical", "pk": true},
            {"name": "user_id", "kind": "categorical", "fk": {"table": "users", "column": "id"}},
            {"name": "value", "kind": "numerical"},
            {"name": "placed", "kind": "timestamp", "timestamp_role": true}
        ]}),
    ];
    let mut files = vec![("users.csv".to_string(), users_csv), ("orders.csv".to_string(), orders_csv)];
    let mut profile_tables = vec![
        TableSpec {
            name: "users".into(),
            columns: vec!["id".into(), "noise".into(), "city".into(), "signup".into(), "label".into()],
            filters: vec![],
        },
        TableSpec {
            name: "orders".into(),
            columns: vec!["oid".into(), "user_id".into(), "value".into(), "placed".into()],
            filters: vec![],
        },
    ];
    let mut join_paths =
        vec![JoinPath { child: "orders".into(), fk: "user_id".into(), parent: "users".into() }];

    if cfg.extra_relation {
        let pages = ["home", "docs", "pricing", "blog"];
        let mut visits_csv = String::from("vid,visitor,page,seen\n");
        let mut vi = 0;
        for u in 0..cfg.users {
            for _ in 0..rng.random_range(1..=3) {
                let ts = signup[u] - Duration::days(rng.random_range(1..200i64));
                visits_csv.push_str(&format!(
                    "v{vi:05},u{u:04},{},{}\n",
                    pages[rng.random_range(0..pages.len())],
                    format_timestamp(ts)
                ));
                vi += 1;
            }
        }
        tables.push(json!({"name": "visits", "file": "visits.csv", "columns": [
            {"name": "vid", "kind": "categorical", "pk": true},
            {"name": "visitor", "kind": "categorical", "fk": {"table": "users", "column": "id"}},
            {"name": "page", "kind": "categorical"},
            {"name": "seen", "kind": "timestamp", "timestamp_role": true}
        ]}));
        files.push(("visits.csv".to_string(), visits_csv));
        profile_tables.push(TableSpec {
            name: "visits".into(),
            columns: vec!["vid".into(), "visitor".into(), "page".into(), "seen".into()],
            filters: vec![],
        });
        join_paths.push(JoinPath { child: "visits".into(), fk: "visitor".into(), parent: "users".into() });
    }

    let task_name = format!(
        "synth_{}_{}",
        match cfg.signal {
            SignalPlacement::TargetOnly => "flat",
            SignalPlacement::NeighborAggregate => "relational",
        },
        cfg.task.name()
    );
    let task_profile = json!({
        "task_name": task_name,
        "task_type": cfg.task.name(),
        "target_table": "users",
        "target_column": "label",
    });

    let train_cutoff = signup[(cfg.users * 3) / 5 - 1] + Duration::seconds(1);
    let valid_cutoff = signup[(cfg.users * 4) / 5 - 1] + Duration::seconds(1);

    SynthDataset {
        schema: json!({"tables": tables}),
        files,
        task_profile,
        data_profile: DataProfile {
            target_table: "users".into(),
            tables: profile_tables,
            join_paths,
        },
        train_cutoff,
        valid_cutoff,
    }
}
