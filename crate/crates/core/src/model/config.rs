use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architectural hyperparameters of the encoder.
///
/// `n_heads` and `d_ff` describe the inherited (general-domain) model;
/// `ext_heads` and `ext_ffn` are the added attention heads and FFN hidden
/// units per layer. Both may be zero, in which case the model is exactly the
/// base architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default)]
    pub ext_heads: usize,
    pub d_ff: usize,
    #[serde(default)]
    pub ext_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default = "default_dropout")]
    pub dropout_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
}

fn default_ln_eps() -> f64 {
    1e-12
}

fn default_dropout() -> f64 {
    0.1
}

/// Which frozen projection a low-rank pair is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    WQ,
    WK,
    WV,
    WO,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [LoraTarget::WQ, LoraTarget::WK, LoraTarget::WV, LoraTarget::WO];

    /// Name of the base tensor inside a layer's attention block.
    pub fn tensor(self) -> &'static str {
        match self {
            LoraTarget::WQ => "w_q",
            LoraTarget::WK => "w_k",
            LoraTarget::WV => "w_v",
            LoraTarget::WO => "w_o",
        }
    }
}

/// Low-rank adapters recorded in the config so the forward pass knows to
/// use `W + (alpha / rank) * A * B` for each target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn has(&self, target: LoraTarget) -> bool {
        self.targets.contains(&target)
    }
}

impl ModelConfig {
    /// A small encoder suitable for CPU experiments.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ext_heads: 0,
            d_ff: 128,
            ext_ffn: 0,
            vocab_size,
            max_seq_len: 64,
            ln_eps: 1e-12,
            dropout_p: 0.1,
            lora: None,
        }
    }

    /// BERT-base geometry with the given vocabulary size.
    pub fn bert_base(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            ext_heads: 0,
            d_ff: 3072,
            ext_ffn: 0,
            vocab_size,
            max_seq_len: 512,
            ln_eps: 1e-12,
            dropout_p: 0.1,
            lora: None,
        }
    }

    /// Per-head key width; extension heads share it.
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Per-head value width, equal to `d_k`.
    pub fn d_v(&self) -> usize {
        self.d_k()
    }

    pub fn total_heads(&self) -> usize {
        self.n_heads + self.ext_heads
    }

    pub fn is_extended(&self) -> bool {
        self.ext_heads > 0 || self.ext_ffn > 0
    }

    pub fn with_extension(mut self, heads: usize, ffn: usize) -> Self {
        self.ext_heads = heads;
        self.ext_ffn = ffn;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return fail("n_layers, d_model, n_heads and d_ff must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("vocab_size and max_seq_len must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return fail(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return fail(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if let Some(lora) = &self.lora {
            if lora.rank == 0 {
                return fail("lora rank must be at least 1".into());
            }
            if lora.rank > self.d_model {
                return fail(format!("lora rank {} exceeds d_model {}", lora.rank, self.d_model));
            }
            if lora.targets.is_empty() {
                return fail("lora needs at least one target".into());
            }
        }
        Ok(())
    }
}
