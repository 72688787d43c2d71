//! The single run configuration every command reads. TOML or JSON, picked by
//! file extension; flags override individual fields after loading.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use relana::base::BaseConfig;
use relana::model::ModelConfig;
use relana::synth::SynthConfig;
use relana::train::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory holding `schema.json` and the CSV files.
    pub data_dir: PathBuf,
    /// Task profile JSON; defaults to `<data_dir>/task.json`.
    pub task_file: Option<PathBuf>,
    /// Data profile JSON. When absent the profile is derived from the
    /// catalog by walking key relations out from the target table.
    pub data_profile: Option<PathBuf>,
    /// Where checkpoints, predictions, registries and reports land.
    pub artifacts: PathBuf,
    pub model: ModelConfig,
    /// Base model settings, used by `train --base-only` and `dispatch`.
    pub base: Option<BaseConfig>,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub split: SplitSection,
    pub derive: DeriveSection,
    pub dispatch: DispatchSection,
    pub report: ReportSection,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            task_file: None,
            data_profile: None,
            artifacts: PathBuf::from("artifacts"),
            model: ModelConfig::default(),
            base: None,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            split: SplitSection::default(),
            derive: DeriveSection::default(),
            dispatch: DispatchSection::default(),
            report: ReportSection::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Temporal split cutoffs. When absent, `<data_dir>/splits.json` (written by
/// `synth-data`) is consulted before giving up.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_cutoff: Option<String>,
    pub valid_cutoff: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeriveSection {
    /// Key-graph hops from the target table to include.
    pub max_hops: usize,
    /// Drop text columns whose longest value exceeds this.
    pub text_limit: usize,
}

impl Default for DeriveSection {
    fn default() -> Self {
        DeriveSection { max_hops: 2, text_limit: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DispatchSection {
    /// Risk tolerance: the deploy threshold is (1 - epsilon) * mu.
    pub epsilon: f64,
    /// EMA decay for registry updates.
    pub beta: f64,
    /// Registry path; defaults to `<artifacts>/registry.json`.
    pub registry: Option<PathBuf>,
    /// Base-model pool directory; defaults to `<artifacts>/pool`.
    pub pool: Option<PathBuf>,
}

impl Default for DispatchSection {
    fn default() -> Self {
        DispatchSection { epsilon: 0.1, beta: 0.9, registry: None, pool: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// How many ranked predictions the report carries.
    pub top_k: usize,
    /// Which split predictions and explanations cover.
    pub split: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection { top_k: 10, split: "test".to_string() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }

    pub fn task_file(&self) -> PathBuf {
        self.task_file.clone().unwrap_or_else(|| self.data_dir.join("task.json"))
    }

    pub fn registry_path(&self) -> PathBuf {
        self.dispatch.registry.clone().unwrap_or_else(|| self.artifacts.join("registry.json"))
    }

    pub fn pool_dir(&self) -> PathBuf {
        self.dispatch.pool.clone().unwrap_or_else(|| self.artifacts.join("pool"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.artifacts.join("checkpoint.json")
    }

    pub fn pretrained_path(&self) -> PathBuf {
        self.artifacts.join("pretrained.json")
    }

    pub fn train_report_path(&self) -> PathBuf {
        self.artifacts.join("train.json")
    }

    pub fn decision_path(&self) -> PathBuf {
        self.artifacts.join("decision.json")
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.artifacts.join("predictions.json")
    }

    pub fn importances_path(&self) -> PathBuf {
        self.artifacts.join("importances.json")
    }
}
