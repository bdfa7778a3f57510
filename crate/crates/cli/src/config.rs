//! Experiment configuration: a TOML file, `key=value` overrides, and flags.

use std::path::{Path, PathBuf};

use agp_core::attack::{AttackMode, PerturbationBudget};
use agp_core::backbone::{BackboneConfig, BackboneMode};
use agp_core::graphdata::{generate_synthetic, load_dataset, split, Dataset, LabelRule, SyntheticSpec};
use agp_core::metrics::DEFAULT_REPETITIONS;
use agp_core::trainer::{PretrainConfig, TrainConfig};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL dataset; when absent the synthetic generator is used.
    pub path: Option<PathBuf>,
    /// Generator seed.
    pub seed: u64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub split_seed: u64,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, seed: 0, split: [0.8, 0.1, 0.1], split_seed: 0, synthetic: SyntheticSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    /// A `backbone.json` file or a pretrain run directory. When absent the
    /// backbone is pretrained in-process from `[pretrain]`.
    pub checkpoint: Option<PathBuf>,
    pub hidden_dim: usize,
    pub layers: usize,
    pub mode: BackboneMode,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self { checkpoint: None, hidden_dim: 300, layers: 5, mode: BackboneMode::Full }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub data_seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let pc = PretrainConfig::default();
        Self {
            data_seed: 1000,
            epochs: pc.epochs,
            lr: pc.lr,
            batch_size: pc.batch_size,
            synthetic: SyntheticSpec { label_rule: LabelRule::MultiTask, ..SyntheticSpec::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Attack repetitions averaged per attacked evaluation.
    pub repetitions: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { repetitions: DEFAULT_REPETITIONS }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub data: DataConfig,
    pub backbone: BackboneSection,
    pub pretrain: PretrainSection,
    pub train: TrainConfig,
    pub attack: PerturbationBudget,
    pub eval: EvalSection,
}

/// Command-line adjustments applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// `section.key=value` pairs; values are TOML literals, bare words are
    /// taken as strings.
    pub set: Vec<String>,
    pub seed: Option<u64>,
    pub mode: Option<AttackMode>,
    pub deterministic: bool,
}

fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_set(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("'{p}' in '{key}' is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults), applies overrides, and validates.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in &ov.set {
            apply_set(&mut table, s)?;
        }
        let mut cfg: ExperimentConfig =
            table.try_into().map_err(|e: toml::de::Error| Failure::config(format!("config: {e}")))?;
        if let Some(seed) = ov.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = ov.mode {
            cfg.attack.mode = mode;
        }
        cfg.deterministic |= ov.deterministic;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Failure::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.attack.validate()?;
        self.data.synthetic.validate()?;
        self.pretrain.synthetic.validate()?;
        self.backbone_config(self.data.synthetic.feature_dim).validate()?;
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|v| !(0.0..=1.0).contains(v)) || ((a + b + c) - 1.0).abs() > 1e-9 || a == 0.0 {
            return Err(Failure::config(format!("split {:?} must be non-negative fractions summing to 1", self.data.split)).into());
        }
        if self.eval.repetitions == 0 {
            return Err(Failure::config("eval.repetitions must be positive").into());
        }
        for p in [&self.data.path, &self.backbone.checkpoint].into_iter().flatten() {
            if !p.exists() {
                return Err(Failure::config(format!("{} does not exist", p.display())).into());
            }
        }
        Ok(())
    }

    pub fn backbone_config(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig::new(input_dim, self.backbone.hidden_dim, self.backbone.layers, self.backbone.mode)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain.epochs,
            lr: self.pretrain.lr,
            batch_size: self.pretrain.batch_size,
            seed: self.seed,
        }
    }

    /// The downstream dataset, loaded or generated.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data.path {
            Some(p) => Ok(load_dataset(p).with_context(|| format!("loading {}", p.display()))?),
            None => Ok(generate_synthetic(&self.data.synthetic, self.data.seed)?),
        }
    }

    pub fn splits(&self, data: &Dataset) -> Result<(Dataset, Dataset, Dataset)> {
        let [a, b, c] = self.data.split;
        Ok(split(data, (a, b, c), self.data.split_seed)?)
    }

    pub fn pretrain_dataset(&self) -> Result<Dataset> {
        Ok(generate_synthetic(&self.pretrain.synthetic, self.pretrain.data_seed)?)
    }
}
