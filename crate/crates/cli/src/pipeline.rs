//! Plumbing shared by the commands: dataset loading, profile resolution,
//! split construction and checkpoint access.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use relana::base::{BasePool, BaseTopology};
use relana::graph::{build_graph, RelGraph};
use relana::model::ModelBundle;
use relana::profile::{
    derive_data_profile, validate_data_profile, validate_task_profile, DeriveConfig, TaskProfile,
    TaskType,
};
use relana::store::{
    extract_slice, load_dataset, parse_timestamp, temporal_split, DataSlice, SplitSets,
};
use relana::train::{derive_seed, extract_labels};

use crate::config::RunConfig;

/// Everything downstream commands need, loaded once.
pub struct Workbench {
    pub task: TaskProfile,
    pub slice: DataSlice,
    pub rgraph: RelGraph,
    pub labels: Vec<Option<f64>>,
}

pub fn open(cfg: &RunConfig) -> Result<Workbench> {
    let dataset = load_dataset(&cfg.data_dir)
        .with_context(|| format!("loading dataset {}", cfg.data_dir.display()))?;
    let task_path = cfg.task_file();
    let task_json: serde_json::Value = read_json(&task_path)?;
    let task = validate_task_profile(&task_json, &dataset.catalog)
        .with_context(|| format!("task profile {}", task_path.display()))?;
    let data_profile = match &cfg.data_profile {
        Some(path) => {
            let json: serde_json::Value = read_json(path)?;
            validate_data_profile(&json, &dataset.catalog)
                .with_context(|| format!("data profile {}", path.display()))?
        }
        None => {
            let dc = DeriveConfig { max_hops: cfg.derive.max_hops, text_limit: cfg.derive.text_limit };
            let (profile, warnings) =
                derive_data_profile(&task, &dataset, &dc).context("deriving data profile")?;
            for w in &warnings {
                eprintln!("profile derivation: {w}");
            }
            profile
        }
    };
    let slice = extract_slice(&dataset, &data_profile).context("extracting data slice")?;
    let rgraph = build_graph(&slice, &data_profile.join_paths, &dataset.catalog)
        .context("building row graph")?;
    let labels = extract_labels(slice.target(), &task.target_column)?;
    Ok(Workbench { task, slice, rgraph, labels })
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Cutoffs written by `synth-data` next to the dataset.
#[derive(Deserialize)]
struct SplitsFile {
    train_cutoff: String,
    valid_cutoff: String,
}

pub fn splits(cfg: &RunConfig, wb: &Workbench) -> Result<SplitSets> {
    let (train_raw, valid_raw) = match (&cfg.split.train_cutoff, &cfg.split.valid_cutoff) {
        (Some(t), Some(v)) => (t.clone(), v.clone()),
        _ => {
            let path = cfg.data_dir.join("splits.json");
            if !path.exists() {
                bail!(
                    "no split cutoffs: set [split] train_cutoff/valid_cutoff or provide {}",
                    path.display()
                );
            }
            let f: SplitsFile = read_json(&path)?;
            (f.train_cutoff, f.valid_cutoff)
        }
    };
    let train_cutoff =
        parse_timestamp(&train_raw).ok_or_else(|| anyhow!("bad train cutoff {train_raw:?}"))?;
    let valid_cutoff =
        parse_timestamp(&valid_raw).ok_or_else(|| anyhow!("bad valid cutoff {valid_raw:?}"))?;
    Ok(temporal_split(&wb.slice, Some(&wb.task.target_column), train_cutoff, valid_cutoff)?)
}

pub fn split_rows(sets: &SplitSets, name: &str) -> Result<Vec<usize>> {
    let rows = match name {
        "train" => sets.train.clone(),
        "valid" => sets.valid.clone(),
        "test" => sets.test.clone(),
        "all" => {
            let mut all = sets.train.clone();
            all.extend_from_slice(&sets.valid);
            all.extend_from_slice(&sets.test);
            all
        }
        other => bail!("unknown split {other:?}; expected train, valid, test or all"),
    };
    if rows.is_empty() {
        bail!("split {name:?} is empty");
    }
    Ok(rows)
}

pub fn metric_name(task: TaskType) -> &'static str {
    match task {
        TaskType::Classification => "auc_roc",
        TaskType::Regression => "mae",
    }
}

/// The seed every read-only pass uses, matching the one training evaluates
/// with so saved metrics reproduce exactly.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.train.seed, "eval", &[])
}

/// Load the trained checkpoint plus, when it wraps a base model, that base's
/// topology from the pool (its parameters already live in the checkpoint).
pub fn load_checkpoint(cfg: &RunConfig) -> Result<(ModelBundle, Option<BaseTopology>)> {
    let path = cfg.checkpoint_path();
    let bundle = ModelBundle::load(&path)
        .with_context(|| format!("loading checkpoint {} (run `train` first)", path.display()))?;
    let base = match &bundle.topology.base {
        None => None,
        Some(attach) => {
            let pool = BasePool::open(&cfg.pool_dir())?;
            let base = pool
                .load(&attach.id)
                .with_context(|| format!("checkpoint wraps base {:?} from the pool", attach.id))?;
            Some(base.topology)
        }
    };
    Ok((bundle, base))
}
