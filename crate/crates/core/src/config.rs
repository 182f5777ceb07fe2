//! Run configuration: a TOML file with sections model, selection, optimizer,
//! mas, replay, data, and run. Unknown keys are rejected up front so a typo in
//! an ablation grid can never silently run the wrong experiment.

use crate::data::UniverseConfig;
use crate::error::{Result, SpclError};
use crate::model::BlockSpec;
use crate::rng::fnv1a_str;
use crate::selection::{LocalizationMode, SelectionStrategy};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelCfg {
    pub width: usize,
    pub expansion: usize,
    pub blocks: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        ModelCfg { width: 32, expansion: 4, blocks: 2 }
    }
}

impl ModelCfg {
    pub fn block_spec(&self) -> BlockSpec {
        BlockSpec { width: self.width, expansion: self.expansion, block_count: self.blocks }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionCfg {
    pub mode: LocalizationMode,
    pub strategy: SelectionStrategy,
    pub rate: f64,
}

impl Default for SelectionCfg {
    fn default() -> Self {
        SelectionCfg {
            mode: LocalizationMode::First,
            strategy: SelectionStrategy::Weight,
            rate: 0.10,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerCfg {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub min_lr: f64,
}

impl Default for OptimizerCfg {
    fn default() -> Self {
        OptimizerCfg {
            base_lr: 7.5e-6,
            epochs: 10,
            batch_size: 32,
            weight_decay: 0.0,
            warmup_fraction: 0.1,
            min_lr: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MasCfg {
    pub enabled: bool,
    pub lambda: f64,
    pub alpha: f64,
    pub conditional_priming: bool,
}

impl Default for MasCfg {
    fn default() -> Self {
        MasCfg { enabled: true, lambda: 0.05, alpha: 0.5, conditional_priming: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ReplayCfg {
    pub enabled: bool,
    pub capacity_fraction: f64,
}

impl Default for ReplayCfg {
    fn default() -> Self {
        ReplayCfg { enabled: true, capacity_fraction: 0.04 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataCfg {
    /// Load an exported universe from this directory when set; otherwise
    /// generate one in memory from `generator` and `seed`.
    pub universe_dir: Option<String>,
    pub seed: u64,
    pub generator: UniverseConfig,
}

impl Default for DataCfg {
    fn default() -> Self {
        DataCfg { universe_dir: None, seed: 7, generator: UniverseConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum Baseline {
    #[serde(rename = "sparse")]
    Sparse,
    #[serde(rename = "full-finetune-er")]
    FlypEr,
}

impl Baseline {
    /// Tag written into metrics records.
    pub fn tag(&self) -> &'static str {
        match self {
            Baseline::Sparse => "sparse",
            Baseline::FlypEr => "FLYP+ER",
        }
    }

    pub fn parse_flag(s: &str) -> Result<Baseline> {
        match s {
            "sparse" => Ok(Baseline::Sparse),
            "full-finetune-er" => Ok(Baseline::FlypEr),
            other => Err(SpclError::Config(format!(
                "unknown baseline {other:?}; expected \"sparse\" or \"full-finetune-er\""
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub baseline: Baseline,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Optional pretrained checkpoint consumed by the run command.
    pub checkpoint: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seeds: vec![0, 1, 2, 3, 4],
            baseline: Baseline::Sparse,
            pretrain_epochs: 20,
            pretrain_lr: 5e-3,
            checkpoint: None,
        }
    }
}

/// Named preset grids mirroring the ablation tables, or an explicit cross product.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblateCfg {
    pub preset: Option<String>,
    pub modes: Vec<LocalizationMode>,
    pub rates: Vec<f64>,
    pub strategies: Vec<SelectionStrategy>,
    pub buffer_fractions: Vec<f64>,
    pub conditional: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelCfg,
    pub selection: SelectionCfg,
    pub optimizer: OptimizerCfg,
    pub mas: MasCfg,
    pub replay: ReplayCfg,
    pub data: DataCfg,
    pub run: RunSection,
    pub ablate: AblateCfg,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| SpclError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SpclError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| SpclError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.block_spec().validate().map_err(|e| SpclError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.selection.rate) {
            return Err(SpclError::Config(format!(
                "selection.rate {} outside [0, 1]",
                self.selection.rate
            )));
        }
        if self.optimizer.epochs < 1 {
            return Err(SpclError::Config("optimizer.epochs must be at least 1".into()));
        }
        if self.optimizer.batch_size < 1 {
            return Err(SpclError::Config("optimizer.batch_size must be at least 1".into()));
        }
        if self.optimizer.base_lr < 0.0 || self.optimizer.min_lr < 0.0 {
            return Err(SpclError::Config("learning rates must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.optimizer.warmup_fraction) {
            return Err(SpclError::Config(format!(
                "optimizer.warmup_fraction {} outside [0, 1]",
                self.optimizer.warmup_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.mas.alpha) {
            return Err(SpclError::Config(format!("mas.alpha {} outside [0, 1]", self.mas.alpha)));
        }
        if self.mas.lambda < 0.0 {
            return Err(SpclError::Config("mas.lambda must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.replay.capacity_fraction) {
            return Err(SpclError::Config(format!(
                "replay.capacity_fraction {} outside [0, 1]",
                self.replay.capacity_fraction
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(SpclError::Config("run.seeds must not be empty".into()));
        }
        if self.data.universe_dir.is_none() {
            self.data.generator.validate().map_err(|e| SpclError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Stable hash over the canonical JSON form, echoed into every record.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a_str(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_reproduce_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.selection.rate, 0.10);
        assert_eq!(cfg.optimizer.base_lr, 7.5e-6);
        assert_eq!(cfg.optimizer.epochs, 10);
        assert_eq!(cfg.replay.capacity_fraction, 0.04);
        assert_eq!(cfg.mas.lambda, 0.05);
        assert_eq!(cfg.run.seeds.len(), 5);
        cfg.validate().unwrap();
    }

    #[test]
    fn empty_toml_is_all_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = RunConfig::from_toml_str("[selection]\nrte = 0.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("rte"), "message: {msg}");
    }

    #[test]
    fn out_of_range_rate_is_rejected() {
        let err = RunConfig::from_toml_str("[selection]\nrate = 1.5\n").unwrap_err();
        assert!(err.to_string().contains("rate"));
    }

    #[test]
    fn baseline_flag_parses() {
        assert_eq!(Baseline::parse_flag("full-finetune-er").unwrap(), Baseline::FlypEr);
        assert_eq!(Baseline::FlypEr.tag(), "FLYP+ER");
        assert!(Baseline::parse_flag("nope").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.selection.rate = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
