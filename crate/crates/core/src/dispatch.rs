//! Base-model selection. Every candidate in the pool is scored by a cheap
//! proxy (clone, quick-fit only the head, measure on a holdout), then the
//! winner's score is compared against a tolerance-adjusted moving average of
//! its past task performance to choose between deploying the base model
//! as-is and augmenting it with the relational network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::base::{BaseBundle, BaseError, BasePool};
use crate::profile::TaskType;
use crate::store::SliceTable;
use crate::tensor::optim::AdamConfig;
use crate::train::{
    base_step, derive_seed, labeled_rows, metric_as_score, predict_rows_base, task_metric,
    TrainError,
};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("dispatch input: {0}")]
    Input(String),
    #[error("scoring: {0}")]
    Scoring(String),
    #[error("dispatch: {0}")]
    Dispatch(String),
    #[error("registry {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("registry parse: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Base(#[from] BaseError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, DispatchError>;

pub const DEFAULT_BETA: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 0.1;
/// Assumed moving-average score for a (model, task) pair never seen before.
pub const SCORE_PRIOR: f64 = 0.5;
pub const PROBE_MIN_ROWS: usize = 64;
pub const PROBE_STEPS: usize = 20;
const PROBE_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub model_id: String,
    pub task_sig: String,
    pub mu: f64,
    pub count: u64,
}

/// Per (model, task) exponential moving average of observed task scores.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerfRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl PerfRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|source| DispatchError::Io { path: path.to_path_buf(), source })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Missing file reads as an empty registry; a malformed one still fails.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(PerfRegistry::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)
            .map_err(|source| DispatchError::Io { path: path.to_path_buf(), source })
    }

    pub fn mu(&self, model_id: &str, task_sig: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.model_id == model_id && e.task_sig == task_sig)
            .map(|e| e.mu)
    }

    pub fn mu_or_prior(&self, model_id: &str, task_sig: &str) -> f64 {
        self.mu(model_id, task_sig).unwrap_or(SCORE_PRIOR)
    }
}

/// Fold one observed score into the registry. The first observation for a
/// pair sets the average outright; later ones move it by a factor of beta.
pub fn update_ema(
    registry: &mut PerfRegistry,
    model_id: &str,
    task_sig: &str,
    score: f64,
    beta: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&score) {
        return Err(DispatchError::Input(format!("score {score} outside [0, 1]")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(DispatchError::Input(format!("beta {beta} outside [0, 1)")));
    }
    match registry
        .entries
        .iter_mut()
        .find(|e| e.model_id == model_id && e.task_sig == task_sig)
    {
        Some(e) => {
            e.mu = beta * e.mu + (1.0 - beta) * score;
            e.count += 1;
        }
        None => {
            registry.entries.push(RegistryEntry {
                model_id: model_id.to_string(),
                task_sig: task_sig.to_string(),
                mu: score,
                count: 1,
            });
            registry.entries.sort_by(|a, b| {
                (&a.model_id, &a.task_sig).cmp(&(&b.model_id, &b.task_sig))
            });
        }
    }
    Ok(())
}

/// Proxy score for one candidate: clone it, freeze everything but the head,
/// run a fixed number of full-batch steps on half the probe rows, and score
/// the other half. Deterministic in (parameters, batch, seed).
pub fn zcp_score(
    bundle: &BaseBundle,
    table: &SliceTable,
    rows: &[usize],
    labels: &[Option<f64>],
    task: TaskType,
    seed: u64,
) -> Result<f64> {
    let mut order = labeled_rows(rows, labels);
    if order.len() < PROBE_MIN_ROWS {
        return Err(DispatchError::Scoring(format!(
            "probe batch has {} labeled rows, needs at least {PROBE_MIN_ROWS}",
            order.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "probe-split", &[]));
    order.shuffle(&mut rng);
    let (fit, holdout) = order.split_at(order.len() / 2);
    let mut probe = bundle.clone();
    probe.store.set_trainable_prefix("", false);
    let head_prefix = format!("base.{}.head.", probe.topology.config.id);
    if probe.store.set_trainable_prefix(&head_prefix, true) == 0 {
        return Err(DispatchError::Scoring(format!("no parameters under {head_prefix:?}")));
    }
    let adam = AdamConfig::with_lr(PROBE_LR);
    for _ in 0..PROBE_STEPS {
        base_step(&mut probe, table, fit, labels, task, &adam)?;
    }
    let preds = predict_rows_base(&probe, table, holdout)?;
    let ys: Vec<f64> = holdout.iter().map(|&r| labels[r].expect("prefiltered")).collect();
    let metric = task_metric(task, &preds, &ys)
        .map_err(|e| DispatchError::Scoring(format!("holdout metric: {e}")))?;
    Ok(metric_as_score(task, metric))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    DeployBase,
    Augment,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Action::DeployBase => "deploy_base",
            Action::Augment => "augment",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub selected: String,
    /// Proxy score per candidate that scored successfully.
    pub scores: BTreeMap<String, f64>,
    /// Failure reason per candidate that did not.
    pub failures: BTreeMap<String, String>,
    pub best_score: f64,
    pub mu: f64,
    pub epsilon: f64,
    pub threshold: f64,
    pub action: Action,
    pub task_sig: String,
}

/// The pure decision rule, separated from scoring so it can be driven with
/// known score sets. Ties on the best score go to the lexicographically
/// smallest id.
pub fn resolve(
    scores: &BTreeMap<String, f64>,
    failures: BTreeMap<String, String>,
    registry: &PerfRegistry,
    task_sig: &str,
    epsilon: f64,
) -> Result<Decision> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(DispatchError::Input(format!("epsilon {epsilon} outside [0, 1)")));
    }
    if scores.is_empty() {
        let detail: Vec<String> = failures.iter().map(|(id, e)| format!("{id}: {e}")).collect();
        return Err(DispatchError::Dispatch(format!(
            "no candidate could be scored ({})",
            detail.join("; ")
        )));
    }
    let mut selected: Option<(&str, f64)> = None;
    for (id, &s) in scores {
        if !s.is_finite() {
            return Err(DispatchError::Input(format!("score for {id:?} is not finite")));
        }
        match selected {
            Some((_, best)) if s <= best => {}
            _ => selected = Some((id, s)),
        }
    }
    let (id, best_score) = selected.expect("scores is nonempty");
    let mu = registry.mu_or_prior(id, task_sig);
    let threshold = (1.0 - epsilon) * mu;
    let action = if best_score >= threshold { Action::DeployBase } else { Action::Augment };
    Ok(Decision {
        selected: id.to_string(),
        scores: scores.clone(),
        failures,
        best_score,
        mu,
        epsilon,
        threshold,
        action,
        task_sig: task_sig.to_string(),
    })
}

/// Score every pool candidate and resolve. Individual scoring failures are
/// recorded and skipped; only a fully failed pool is an error.
#[allow(clippy::too_many_arguments)]
pub fn decide(
    pool: &BasePool,
    registry: &PerfRegistry,
    table: &SliceTable,
    rows: &[usize],
    labels: &[Option<f64>],
    task: TaskType,
    task_sig: &str,
    epsilon: f64,
    seed: u64,
) -> Result<Decision> {
    if pool.list().is_empty() {
        return Err(DispatchError::Input("base-model pool is empty".into()));
    }
    let mut scores = BTreeMap::new();
    let mut failures = BTreeMap::new();
    for entry in pool.list() {
        let outcome = pool
            .load(&entry.id)
            .map_err(DispatchError::from)
            .and_then(|bundle| zcp_score(&bundle, table, rows, labels, task, seed));
        match outcome {
            Ok(s) => {
                scores.insert(entry.id.clone(), s);
            }
            Err(e) => {
                failures.insert(entry.id.clone(), e.to_string());
            }
        }
    }
    resolve(&scores, failures, registry, task_sig, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base::{build_base_topology, init_base, BaseConfig, BaseKind};
    use crate::profile::{DataProfile, TableSpec};
    use crate::store::{extract_slice, load_dataset, DataSlice};
    use crate::train::{train_base, TrainConfig};
    use crate::store::SplitSets;
    use proptest::prelude::*;
    use serde_json::json;

    #[test]
    fn ema_hand_values_and_count_tracking() {
        let mut reg = PerfRegistry::default();
        update_ema(&mut reg, "m", "t", 0.7, 0.9).unwrap();
        assert_eq!(reg.mu("m", "t"), Some(0.7));
        assert_eq!(reg.entries[0].count, 1);
        let mut reg2 = PerfRegistry {
            entries: vec![RegistryEntry {
                model_id: "m".into(),
                task_sig: "t".into(),
                mu: 0.8,
                count: 3,
            }],
        };
        update_ema(&mut reg2, "m", "t", 0.6, 0.9).unwrap();
        assert!((reg2.mu("m", "t").unwrap() - 0.78).abs() < 1e-12);
        assert_eq!(reg2.entries[0].count, 4);
    }

    #[test]
    fn ema_rejects_out_of_range_scores() {
        let mut reg = PerfRegistry::default();
        assert!(matches!(update_ema(&mut reg, "m", "t", 1.2, 0.9), Err(DispatchError::Input(_))));
        assert!(matches!(update_ema(&mut reg, "m", "t", -0.1, 0.9), Err(DispatchError::Input(_))));
        assert!(matches!(update_ema(&mut reg, "m", "t", 0.5, 1.0), Err(DispatchError::Input(_))));
        assert!(reg.entries.is_empty());
    }

    #[test]
    fn ema_converges_monotonically_to_a_constant_stream() {
        let mut reg = PerfRegistry::default();
        update_ema(&mut reg, "m", "t", 0.2, 0.9).unwrap();
        let mut last = 0.2;
        for _ in 0..50 {
            update_ema(&mut reg, "m", "t", 0.9, 0.9).unwrap();
            let mu = reg.mu("m", "t").unwrap();
            assert!(mu > last, "moving average must rise toward the stream");
            assert!(mu < 0.9 + 1e-12);
            last = mu;
        }
        assert!((0.9 - last).abs() < 0.004, "final gap {}", 0.9 - last);
    }

    #[test]
    fn registry_json_shape_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("perf.json");
        let mut reg = PerfRegistry::default();
        update_ema(&mut reg, "dnn0", "abcd", 0.75, 0.9).unwrap();
        update_ema(&mut reg, "res1", "abcd", 0.5, 0.9).unwrap();
        reg.save(&path).unwrap();
        let raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["entries"][0]["model_id"], "dnn0");
        assert_eq!(raw["entries"][0]["task_sig"], "abcd");
        assert_eq!(raw["entries"][0]["mu"], 0.75);
        assert_eq!(raw["entries"][0]["count"], 1);
        assert_eq!(PerfRegistry::load(&path).unwrap(), reg);
        assert_eq!(
            PerfRegistry::load_or_default(&dir.path().join("missing.json")).unwrap(),
            PerfRegistry::default()
        );
    }

    fn one_score(id: &str, s: f64) -> BTreeMap<String, f64> {
        BTreeMap::from([(id.to_string(), s)])
    }

    #[test]
    fn threshold_arithmetic_matches_hand_values() {
        let reg = PerfRegistry {
            entries: vec![RegistryEntry {
                model_id: "m".into(),
                task_sig: "t".into(),
                mu: 0.8,
                count: 2,
            }],
        };
        let d = resolve(&one_score("m", 0.73), BTreeMap::new(), &reg, "t", 0.1).unwrap();
        assert!((d.threshold - 0.72).abs() < 1e-12);
        assert_eq!(d.action, Action::DeployBase);
        let d2 = resolve(&one_score("m", 0.71), BTreeMap::new(), &reg, "t", 0.1).unwrap();
        assert_eq!(d2.action, Action::Augment);
    }

    #[test]
    fn unseen_pairs_fall_back_to_the_prior() {
        let d =
            resolve(&one_score("m", 0.46), BTreeMap::new(), &PerfRegistry::default(), "t", 0.1)
                .unwrap();
        assert!((d.mu - SCORE_PRIOR).abs() < 1e-12);
        assert!((d.threshold - 0.45).abs() < 1e-12);
        assert_eq!(d.action, Action::DeployBase);
    }

    #[test]
    fn argmax_ignores_the_registry_and_ties_break_lexicographically() {
        let reg = PerfRegistry {
            entries: vec![RegistryEntry {
                model_id: "worse".into(),
                task_sig: "t".into(),
                mu: 0.99,
                count: 9,
            }],
        };
        let scores = BTreeMap::from([("better".to_string(), 0.9), ("worse".to_string(), 0.6)]);
        let d = resolve(&scores, BTreeMap::new(), &reg, "t", 0.1).unwrap();
        assert_eq!(d.selected, "better");

        let tied = BTreeMap::from([("b".to_string(), 0.7), ("a".to_string(), 0.7)]);
        let t = resolve(&tied, BTreeMap::new(), &PerfRegistry::default(), "t", 0.1).unwrap();
        assert_eq!(t.selected, "a");
    }

    #[test]
    fn fully_failed_scoring_is_a_dispatch_error() {
        let failures = BTreeMap::from([("m".to_string(), "boom".to_string())]);
        let out = resolve(&BTreeMap::new(), failures, &PerfRegistry::default(), "t", 0.1);
        match out {
            Err(DispatchError::Dispatch(msg)) => assert!(msg.contains("boom")),
            other => panic!("expected dispatch error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn shifting_every_score_never_changes_the_selection(
            entries in proptest::collection::btree_map("[a-f]", 0.0..1.0f64, 1..6),
            shift in -0.5..0.5f64,
        ) {
            let reg = PerfRegistry::default();
            let before = resolve(&entries, BTreeMap::new(), &reg, "t", 0.1).unwrap();
            let shifted: BTreeMap<String, f64> =
                entries.iter().map(|(k, v)| (k.clone(), v + shift)).collect();
            let after = resolve(&shifted, BTreeMap::new(), &reg, "t", 0.1).unwrap();
            prop_assert_eq!(before.selected, after.selected);
        }

        #[test]
        fn raising_the_best_score_never_revokes_deployment(
            mu in 0.0..1.0f64,
            epsilon in 0.0..0.9f64,
            score in 0.0..1.0f64,
            bump in 0.0..0.5f64,
        ) {
            let reg = PerfRegistry {
                entries: vec![RegistryEntry {
                    model_id: "m".into(),
                    task_sig: "t".into(),
                    mu,
                    count: 1,
                }],
            };
            let low = resolve(&one_score("m", score), BTreeMap::new(), &reg, "t", epsilon).unwrap();
            let high =
                resolve(&one_score("m", score + bump), BTreeMap::new(), &reg, "t", epsilon).unwrap();
            prop_assert!(!(low.action == Action::DeployBase && high.action == Action::Augment));
        }

        #[test]
        fn ema_update_is_a_contraction(
            mu in 0.0..1.0f64,
            score in 0.0..1.0f64,
            beta in 0.0..0.999f64,
        ) {
            let mut reg = PerfRegistry {
                entries: vec![RegistryEntry {
                    model_id: "m".into(),
                    task_sig: "t".into(),
                    mu,
                    count: 1,
                }],
            };
            update_ema(&mut reg, "m", "t", score, beta).unwrap();
            let next = reg.mu("m", "t").unwrap();
            prop_assert!((next - score).abs() <= beta * (mu - score).abs() + 1e-12);
        }
    }

    /// Flat separable fixture with enough rows for probing.
    fn probe_fixture(n: usize) -> (tempfile::TempDir, DataSlice, Vec<Option<f64>>) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("schema.json"),
            json!({"tables": [
                {"name": "users", "file": "users.csv", "columns": [
                    {"name": "id", "kind": "categorical", "pk": true},
                    {"name": "signal", "kind": "numerical"},
                    {"name": "churn", "kind": "numerical"}
                ]}
            ]})
            .to_string(),
        )
        .unwrap();
        let mut users = String::from("id,signal,churn\n");
        for i in 0..n {
            let label = i % 2;
            let jitter = ((i * 13) % 7) as f64 / 20.0;
            let signal = if label == 1 { 1.0 + jitter } else { -1.0 - jitter };
            users.push_str(&format!("u{i:03},{signal:.3},{label}\n"));
        }
        std::fs::write(dir.path().join("users.csv"), users).unwrap();
        let profile = DataProfile {
            target_table: "users".into(),
            tables: vec![TableSpec {
                name: "users".into(),
                columns: vec!["id".into(), "signal".into(), "churn".into()],
                filters: vec![],
            }],
            join_paths: vec![],
        };
        let ds = load_dataset(dir.path()).unwrap();
        let slice = extract_slice(&ds, &profile).unwrap();
        let labels = crate::train::extract_labels(slice.target(), "churn").unwrap();
        (dir, slice, labels)
    }

    fn fresh_base(slice: &DataSlice, id: &str, seed: u64) -> BaseBundle {
        let cfg = BaseConfig { dim: 4, width: 8, ..BaseConfig::new(id, BaseKind::Dnn) };
        let topo =
            build_base_topology(slice, cfg, Some(TaskType::Classification), Some("churn")).unwrap();
        init_base(topo, seed)
    }

    #[test]
    fn probe_scores_are_bit_identical_across_runs() {
        let (_dir, slice, labels) = probe_fixture(80);
        let bundle = fresh_base(&slice, "m0", 3);
        let rows: Vec<usize> = (0..80).collect();
        let a = zcp_score(&bundle, slice.target(), &rows, &labels, TaskType::Classification, 42)
            .unwrap();
        let b = zcp_score(&bundle, slice.target(), &rows, &labels, TaskType::Classification, 42)
            .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn separating_model_scores_one() {
        let (_dir, slice, labels) = probe_fixture(80);
        let mut bundle = fresh_base(&slice, "m0", 7);
        let splits = SplitSets {
            train: (0..80).collect(),
            valid: (0..80).collect(),
            test: vec![],
            skipped: 0,
        };
        let cfg = TrainConfig {
            batch_size: 40,
            lr: 3e-2,
            max_epochs: 20,
            patience: Some(20),
            ..TrainConfig::default()
        };
        train_base(&mut bundle, &slice, &labels, &splits, TaskType::Classification, &cfg, None)
            .unwrap();
        let rows: Vec<usize> = (0..80).collect();
        let s = zcp_score(&bundle, slice.target(), &rows, &labels, TaskType::Classification, 1)
            .unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let (_dir, slice, labels) = probe_fixture(80);
        let bundle = fresh_base(&slice, "m0", 11);
        let rows: Vec<usize> = (0..80).collect();
        let mut sum = 0.0;
        for seed in 0..20u64 {
            let mut shuffled = labels.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            shuffled.shuffle(&mut rng);
            let s =
                zcp_score(&bundle, slice.target(), &rows, &shuffled, TaskType::Classification, seed)
                    .unwrap();
            sum += s;
        }
        let mean = sum / 20.0;
        assert!((mean - 0.5).abs() <= 0.1, "mean proxy score {mean}");
    }

    #[test]
    fn small_or_single_class_batches_fail_scoring() {
        let (_dir, slice, labels) = probe_fixture(80);
        let bundle = fresh_base(&slice, "m0", 5);
        let short: Vec<usize> = (0..40).collect();
        assert!(matches!(
            zcp_score(&bundle, slice.target(), &short, &labels, TaskType::Classification, 0),
            Err(DispatchError::Scoring(_))
        ));
        let ones: Vec<Option<f64>> = vec![Some(1.0); 80];
        let rows: Vec<usize> = (0..80).collect();
        assert!(matches!(
            zcp_score(&bundle, slice.target(), &rows, &ones, TaskType::Classification, 0),
            Err(DispatchError::Scoring(_))
        ));
    }

    #[test]
    fn decide_prefers_the_model_that_probes_better() {
        let (_dir, slice, labels) = probe_fixture(80);
        let pool_dir = tempfile::tempdir().unwrap();
        let mut pool = BasePool::open(pool_dir.path()).unwrap();

        let mut good = fresh_base(&slice, "good", 7);
        let splits = SplitSets {
            train: (0..80).collect(),
            valid: (0..80).collect(),
            test: vec![],
            skipped: 0,
        };
        let cfg = TrainConfig {
            batch_size: 40,
            lr: 3e-2,
            max_epochs: 20,
            patience: Some(20),
            ..TrainConfig::default()
        };
        train_base(&mut good, &slice, &labels, &splits, TaskType::Classification, &cfg, None)
            .unwrap();
        pool.register(&good, Some("probe-fixture")).unwrap();

        // A constant-output candidate: zero trunk and head force tied
        // predictions, which probe to exactly chance level.
        let mut flat = fresh_base(&slice, "flat", 8);
        for name in flat.store.trainable_names() {
            flat.store.get_mut(&name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        pool.register(&flat, Some("probe-fixture")).unwrap();

        let rows: Vec<usize> = (0..80).collect();
        let decision = decide(
            &pool,
            &PerfRegistry::default(),
            slice.target(),
            &rows,
            &labels,
            TaskType::Classification,
            "sig",
            0.1,
            3,
        )
        .unwrap();
        assert_eq!(decision.selected, "good");
        assert_eq!(decision.scores.len(), 2);
        assert!((decision.scores["flat"] - 0.5).abs() < 1e-12);
        assert!((decision.threshold - 0.45).abs() < 1e-12);
        assert_eq!(decision.action, Action::DeployBase);
        assert!(decision.failures.is_empty());
    }

    #[test]
    fn decide_surfaces_total_scoring_failure() {
        let (_dir, slice, labels) = probe_fixture(80);
        let pool_dir = tempfile::tempdir().unwrap();
        let mut pool = BasePool::open(pool_dir.path()).unwrap();
        pool.register(&fresh_base(&slice, "m0", 2), Some("probe-fixture")).unwrap();
        let short: Vec<usize> = (0..10).collect();
        let out = decide(
            &pool,
            &PerfRegistry::default(),
            slice.target(),
            &short,
            &labels,
            TaskType::Classification,
            "sig",
            0.1,
            0,
        );
        match out {
            Err(DispatchError::Dispatch(msg)) => assert!(msg.contains("m0")),
            other => panic!("expected dispatch error, got {other:?}"),
        }
    }
}
