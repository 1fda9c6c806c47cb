use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{schema, EncoderWeights, LoraConfig, LoraTarget, ParamGroup, ParamKind, INIT_STD};
use crate::numerics::Tensor;

use super::checkpoint::Checkpoint;
use super::mask::{Technique, TrainabilityMask};

/// How freshly added extension tensors are initialized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Output projections (`W'_O`, `W'_2`, `b'_2`) start at zero, so the
    /// extended model computes exactly the base function.
    #[default]
    ZeroOutput,
    /// Every extension matrix random, extension biases zero.
    FullRandom,
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitPolicy::ZeroOutput => "zero_output",
            InitPolicy::FullRandom => "full_random",
        })
    }
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_output" => Ok(InitPolicy::ZeroOutput),
            "full_random" => Ok(InitPolicy::FullRandom),
            other => Err(Error::InvalidArgument(format!(
                "unknown init policy `{other}` (expected zero_output or full_random)"
            ))),
        }
    }
}

fn is_output_side(name: &str) -> bool {
    name.ends_with("attn.ext.w_o") || name.ends_with("ffn.ext.w_2") || name.ends_with("ffn.ext.b_2")
}

/// Grows `base` by `heads` attention heads and `ffn` hidden units per layer.
/// Inherited tensors are copied bit for bit; the mask trains only the additions.
pub fn extend_checkpoint(base: &Checkpoint, heads: usize, ffn: usize, policy: InitPolicy, seed: u64) -> Result<Checkpoint> {
    let base_cfg = base.config();
    if base_cfg.is_extended() {
        return Err(Error::AlreadyExtended {
            heads: base_cfg.ext_heads,
            ffn: base_cfg.ext_ffn,
        });
    }
    if base_cfg.lora.is_some() {
        return Err(Error::TechniqueMismatch {
            technique: Technique::AfAdapter.to_string(),
            reason: "cannot extend a checkpoint that carries LoRA factors".into(),
        });
    }
    let cfg = base_cfg.clone().with_extension(heads, ffn);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut named = IndexMap::new();
    for spec in schema(&cfg) {
        let t = match spec.group {
            ParamGroup::Inherited => base.weights.tensor(&spec.name)?.clone(),
            ParamGroup::Extension => {
                let random = match policy {
                    InitPolicy::ZeroOutput => !is_output_side(&spec.name),
                    InitPolicy::FullRandom => spec.kind == ParamKind::Matrix,
                };
                if random {
                    Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng) as f32)
                } else {
                    Tensor::zeros(&spec.shape)
                }
            }
            ParamGroup::Lora => unreachable!("extended config has no LoRA factors"),
        };
        named.insert(spec.name, t);
    }
    let weights = EncoderWeights::from_tensors(cfg.clone(), named)?;
    Ok(Checkpoint {
        mask: TrainabilityMask::for_technique(&cfg, Technique::AfAdapter)?,
        weights,
        provenance: format!(
            "extended(heads={heads},ffn={ffn},init={policy},seed={seed}) <- {}",
            base.provenance
        ),
    })
}

/// Attaches low-rank factors to the chosen attention projections of every
/// layer. `A ~ N(0, 0.02^2)` and `B = 0`, so the function is unchanged.
pub fn lora_attach(base: &Checkpoint, rank: usize, alpha: f64, targets: &[LoraTarget], seed: u64) -> Result<Checkpoint> {
    let base_cfg = base.config();
    if rank == 0 {
        return Err(Error::InvalidArgument("LoRA rank must be at least 1".into()));
    }
    let min_dim = base_cfg.d_model.min(base_cfg.n_heads * base_cfg.d_k());
    if rank > min_dim {
        return Err(Error::InvalidArgument(format!(
            "LoRA rank {rank} exceeds the smallest projection dimension {min_dim}"
        )));
    }
    if base_cfg.lora.is_some() || base_cfg.is_extended() {
        return Err(Error::TechniqueMismatch {
            technique: Technique::Lora.to_string(),
            reason: "LoRA attaches to an unextended checkpoint without existing factors".into(),
        });
    }
    let mut targets = targets.to_vec();
    targets.sort();
    targets.dedup();
    let mut cfg = base_cfg.clone();
    cfg.lora = Some(LoraConfig { rank, alpha, targets });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut named = IndexMap::new();
    for spec in schema(&cfg) {
        let t = match spec.group {
            ParamGroup::Lora if spec.name.ends_with(".a") => {
                Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng) as f32)
            }
            ParamGroup::Lora => Tensor::zeros(&spec.shape),
            _ => base.weights.tensor(&spec.name)?.clone(),
        };
        named.insert(spec.name, t);
    }
    let weights = EncoderWeights::from_tensors(cfg.clone(), named)?;
    Ok(Checkpoint {
        mask: TrainabilityMask::for_technique(&cfg, Technique::Lora)?,
        weights,
        provenance: format!("lora(rank={rank},alpha={alpha},seed={seed}) <- {}", base.provenance),
    })
}

/// Default LoRA targets: query and value projections.
pub const DEFAULT_LORA_TARGETS: [LoraTarget; 2] = [LoraTarget::WQ, LoraTarget::WV];
