use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Reduction;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    #[default]
    Nmt,
    SyntheticPhase1,
    SyntheticPhase2,
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Nmt, Stage::SyntheticPhase1, Stage::SyntheticPhase2, Stage::Finetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Nmt => "nmt",
            Stage::SyntheticPhase1 => "synthetic-phase1",
            Stage::SyntheticPhase2 => "synthetic-phase2",
            Stage::Finetune => "finetune",
        }
    }

    pub fn next(self) -> Option<Stage> {
        match self {
            Stage::Nmt => Some(Stage::SyntheticPhase1),
            Stage::SyntheticPhase1 => Some(Stage::SyntheticPhase2),
            Stage::SyntheticPhase2 => Some(Stage::Finetune),
            Stage::Finetune => None,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    Single,
    LsMtl,
    NashMtl,
    DomainAdapt,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Single => "single",
            TrainMode::LsMtl => "ls-mtl",
            TrainMode::NashMtl => "nash-mtl",
            TrainMode::DomainAdapt => "domain-adapt",
        }
    }

    pub fn is_multitask(self) -> bool {
        matches!(self, TrainMode::LsMtl | TrainMode::NashMtl)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [TrainMode::Single, TrainMode::LsMtl, TrainMode::NashMtl, TrainMode::DomainAdapt]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Training hyperparameters plus the model shape. Serialized as a flat TOML
/// document; `domain_groups` is the only table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// Caps the optimizer steps per epoch; 0 means one full pass.
    pub max_steps_per_epoch: usize,
    pub seed: u64,
    pub stage: Stage,
    pub mode: TrainMode,
    pub reduction: Reduction,
    pub nash_tol: f64,
    pub nash_max_iters: usize,
    /// Declared DA range; scores are mapped onto [0, 1] before training.
    pub da_min: f64,
    pub da_max: f64,
    /// Beam used for dev TER during training (1 = greedy).
    pub dev_beam: usize,
    pub eval_beam: usize,
    pub length_penalty: f64,
    pub bpe_merges: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub adapter_dim: usize,
    pub dropout: f64,
    /// Domain label to adapter group. Empty means one group per domain.
    pub domain_groups: BTreeMap<String, String>,
    pub domain_default: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.997,
            adam_eps: 1e-9,
            warmup_steps: 15000,
            patience: 5,
            max_epochs: 10000,
            max_steps_per_epoch: 0,
            seed: 0,
            stage: Stage::Nmt,
            mode: TrainMode::Single,
            reduction: Reduction::Mean,
            nash_tol: crate::losses::DEFAULT_TOL,
            nash_max_iters: crate::losses::DEFAULT_MAX_ITERS,
            da_min: 0.0,
            da_max: 100.0,
            dev_beam: 1,
            eval_beam: crate::decode::DEFAULT_BEAM,
            length_penalty: crate::decode::DEFAULT_LENGTH_PENALTY,
            bpe_merges: 32000,
            embed_dim: 512,
            ff_dim: 2048,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            max_len: 128,
            adapter_dim: 512,
            dropout: 0.1,
            domain_groups: BTreeMap::new(),
            domain_default: None,
        }
    }
}

impl TrainConfig {
    /// Hyperparameters of the published setup.
    pub fn paper_scale() -> Self {
        TrainConfig::default()
    }

    /// Desk-scale profile sized for the shipped toy corpora.
    pub fn toy() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_steps: 100,
            patience: 5,
            max_epochs: 200,
            bpe_merges: 400,
            embed_dim: 32,
            ff_dim: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            max_len: 24,
            adapter_dim: 16,
            dropout: 0.0,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
            ("nash_max_iters", self.nash_max_iters),
            ("dev_beam", self.dev_beam),
            ("eval_beam", self.eval_beam),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must be in [0, 1)")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.nash_tol > 0.0) {
            return Err(Error::Config("adam_eps and nash_tol must be positive".into()));
        }
        if !(self.da_max > self.da_min) {
            return Err(Error::Config(format!("empty DA range [{}, {}]", self.da_min, self.da_max)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.mode != TrainMode::Single && self.stage != Stage::Finetune {
            return Err(Error::Config(format!(
                "mode {} applies to the finetune stage only, not {}",
                self.mode, self.stage
            )));
        }
        self.model_config(Vec::new()).validate()
    }

    /// Model shape for a vocabulary that declares `langids`.
    pub fn model_config(&self, langids: Vec<String>) -> ModelConfig {
        ModelConfig {
            vocab_size: 0,
            embed_dim: self.embed_dim,
            ff_dim: self.ff_dim,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            max_len: self.max_len,
            adapter_dim: self.adapter_dim,
            dropout: self.dropout,
            strict_len: false,
            langids,
        }
    }

    /// Same configuration for another stage; the mode only survives into finetuning.
    pub fn for_stage(&self, stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            mode: if stage == Stage::Finetune { self.mode } else { TrainMode::Single },
            domain_groups: if stage == Stage::Finetune { self.domain_groups.clone() } else { BTreeMap::new() },
            domain_default: if stage == Stage::Finetune { self.domain_default.clone() } else { None },
            ..self.clone()
        }
    }

    /// Linear warmup to `learning_rate`, then constant. `step` is 1-based.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn scale_da(&self, da: f64) -> f64 {
        (da - self.da_min) / (self.da_max - self.da_min)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// `paper` (the defaults) or `toy`.
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(TrainConfig::default()),
            "toy" => Ok(TrainConfig::toy()),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }

    /// This configuration with the keys of `table` replaced.
    pub fn with_overrides(&self, table: &toml::Table) -> Result<Self> {
        let mut merged = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in table {
            merged.insert(k.clone(), v.clone());
        }
        let c: TrainConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// `profile` overridden by the TOML file at `path`.
    pub fn load_over(profile: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        TrainConfig::profile(profile)?.with_overrides(&table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub const LR_SCHEDULE: &str = "linear-warmup-then-constant";
