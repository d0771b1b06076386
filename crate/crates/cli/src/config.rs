use std::path::{Path, PathBuf};

use clap::ValueEnum;
use mmoe::data::SyntheticTask;
use mmoe::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
    pub output_dir: PathBuf,
    /// Steps between intermediate checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Progress line on stderr every this many steps; 0 silences it.
    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: SyntheticTask::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            log_every: 100,
        }
    }
}

impl RunConfig {
    /// Cross-field checks; runs before anything touches the filesystem.
    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate(&self.model)?;
        if self.task.vocab_size() > self.model.vocab_size {
            return Err(Failure::Invalid(format!(
                "task uses {} tokens but model.vocab_size is {}",
                self.task.vocab_size(),
                self.model.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyFlag {
    FixedTopk,
    TopP,
    MmoeGlobalBatch,
    MmoeMicroBatch,
    MmoeLayer,
}

impl StrategyFlag {
    fn config_name(self) -> &'static str {
        match self {
            StrategyFlag::FixedTopk => "fixed_topk",
            StrategyFlag::TopP => "top_p",
            StrategyFlag::MmoeGlobalBatch => "mmoe_global_batch",
            StrategyFlag::MmoeMicroBatch => "mmoe_micro_batch",
            StrategyFlag::MmoeLayer => "mmoe_layer",
        }
    }
}

/// Shortcuts for common settings, each equivalent to one dotted override.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct TrainFlags {
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyFlag>,
    /// Expert count for fixed Top-k.
    #[arg(long)]
    pub k: Option<usize>,
    /// Probability threshold for Top-p.
    #[arg(long)]
    pub p: Option<f32>,
    #[arg(long)]
    pub k_min: Option<usize>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Capacity-aware sampling temperature.
    #[arg(long)]
    pub tau: Option<f32>,
    /// Average per-layer activation budget.
    #[arg(long)]
    pub budget_avg: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainFlags {
    pub fn as_overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(s) = self.strategy {
            out.push(format!("train.strategy.kind={}", s.config_name()));
        }
        let pairs: [(&str, Option<String>); 7] = [
            ("train.strategy.k_fixed", self.k.map(|v| v.to_string())),
            ("train.strategy.p", self.p.map(|v| v.to_string())),
            ("train.strategy.k_min", self.k_min.map(|v| v.to_string())),
            ("train.strategy.k_max", self.k_max.map(|v| v.to_string())),
            ("train.strategy.tau", self.tau.map(|v| v.to_string())),
            ("train.strategy.budget_avg", self.budget_avg.map(|v| v.to_string())),
            ("train.seed", self.seed.map(|v| v.to_string())),
        ];
        for (key, v) in pairs {
            if let Some(v) = v {
                out.push(format!("{key}={v}"));
            }
        }
        out
    }
}

/// Sets `path` (dot separated) inside `root`, creating objects on the way.
/// The value is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), Failure> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::Invalid(format!("override '{assignment}' is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Failure::Invalid(format!("empty key in override '{assignment}'")));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().expect("object");
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Reads the config file (if any), applies overrides in order and parses the
/// result.
pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Invalid(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("config {}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| Failure::Invalid(format!("config: {e}")))
}
