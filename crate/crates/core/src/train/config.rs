use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Optimization settings. Field names are the JSON keys of a config file;
/// missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub micro_batch_size: usize,
    pub grad_accum_steps: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub seed: u64,
    pub mask_rate: f64,
    pub max_seq_len: usize,
    /// Global gradient-norm clip; off when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 4e-4,
            warmup_steps: 1000,
            total_steps: 100_000,
            micro_batch_size: 128,
            grad_accum_steps: 4,
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            seed: 0,
            mask_rate: 0.15,
            max_seq_len: 512,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch_size * self.grad_accum_steps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.micro_batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("micro_batch_size and grad_accum_steps must be positive".into());
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return bad(format!("peak_lr {} must be finite and non-negative", self.peak_lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be finite and non-negative", self.weight_decay));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate {} outside [0, 1)", self.mask_rate));
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must leave room for [CLS], a token and [SEP]".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive".into());
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Linear warmup from zero to `peak_lr`, then linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    let (warm, total) = (cfg.warmup_steps, cfg.total_steps);
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond total_steps {total}")));
    }
    Ok(if step <= warm {
        if warm == 0 {
            cfg.peak_lr
        } else {
            cfg.peak_lr * step as f64 / warm as f64
        }
    } else {
        cfg.peak_lr * (total - step) as f64 / (total - warm) as f64
    })
}
