use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{schema, ModelConfig, ParamGroup};

/// Continual-pretraining technique; decides which tensors the optimizer may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    /// Train only the added heads and hidden units.
    AfAdapter,
    /// Train every tensor of the unextended model.
    FineTuning,
    /// Train only low-rank adapter factors.
    Lora,
}

impl Technique {
    pub const ALL: [Technique; 3] = [Technique::FineTuning, Technique::AfAdapter, Technique::Lora];

    pub fn as_str(self) -> &'static str {
        match self {
            Technique::AfAdapter => "af_adapter",
            Technique::FineTuning => "fine_tuning",
            Technique::Lora => "lora",
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "af_adapter" => Ok(Technique::AfAdapter),
            "fine_tuning" => Ok(Technique::FineTuning),
            "lora" => Ok(Technique::Lora),
            other => Err(Error::InvalidArgument(format!(
                "unknown technique `{other}` (expected af_adapter, fine_tuning or lora)"
            ))),
        }
    }
}

/// Per-tensor trainable flag, keyed by parameter path, in schema order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TrainabilityMask {
    flags: IndexMap<String, bool>,
}

impl TrainabilityMask {
    pub fn from_flags(flags: IndexMap<String, bool>) -> Self {
        TrainabilityMask { flags }
    }

    /// Every tensor of `cfg` frozen.
    pub fn frozen(cfg: &ModelConfig) -> Self {
        Self::by_group(cfg, |_| false)
    }

    fn by_group(cfg: &ModelConfig, trainable: impl Fn(ParamGroup) -> bool) -> Self {
        TrainabilityMask {
            flags: schema(cfg)
                .into_iter()
                .map(|spec| (spec.name, trainable(spec.group)))
                .collect(),
        }
    }

    /// Mask for `technique`, after checking the config carries the tensors it needs.
    pub fn for_technique(cfg: &ModelConfig, technique: Technique) -> Result<Self> {
        let mismatch = |reason: &str| Error::TechniqueMismatch {
            technique: technique.to_string(),
            reason: reason.to_string(),
        };
        match technique {
            Technique::AfAdapter => {
                if cfg.lora.is_some() {
                    return Err(mismatch("checkpoint carries LoRA factors"));
                }
                Ok(Self::by_group(cfg, |g| g == ParamGroup::Extension))
            }
            Technique::FineTuning => {
                if cfg.is_extended() {
                    return Err(mismatch("fine-tuning trains the unextended model (heads=0, ffn=0)"));
                }
                if cfg.lora.is_some() {
                    return Err(mismatch("checkpoint carries LoRA factors"));
                }
                Ok(Self::by_group(cfg, |_| true))
            }
            Technique::Lora => {
                if cfg.lora.is_none() {
                    return Err(mismatch("no LoRA factors attached"));
                }
                if cfg.is_extended() {
                    return Err(mismatch("LoRA applies to the unextended model"));
                }
                Ok(Self::by_group(cfg, |g| g == ParamGroup::Lora))
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, bool)> {
        self.flags.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, t)| *t).map(|(k, _)| k)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.iter().filter(|(_, t)| !*t).map(|(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn any_trainable(&self) -> bool {
        self.flags.values().any(|&t| t)
    }
}

/// Scalar counts for a checkpoint under its mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
}

impl ParamCount {
    /// Counts straight from the schema; no tensor is allocated.
    pub fn from_config(cfg: &ModelConfig, mask: &TrainabilityMask) -> Self {
        let mut total = 0;
        let mut trainable = 0;
        for spec in schema(cfg) {
            total += spec.numel();
            if mask.is_trainable(&spec.name) {
                trainable += spec.numel();
            }
        }
        ParamCount {
            total,
            trainable,
            ratio: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        }
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} trainable={} ratio={:.2}%",
            self.total,
            self.trainable,
            self.ratio * 100.0
        )
    }
}
