//! Growing a base checkpoint into an extended one, trainability masks,
//! parameter accounting, the LoRA baseline, and the checkpoint file format.

mod checkpoint;
mod extend;
mod mask;

pub use checkpoint::{tensor_digest, Checkpoint, RawCheckpoint, FORMAT_VERSION, MAGIC};
pub use extend::{extend_checkpoint, lora_attach, InitPolicy, DEFAULT_LORA_TARGETS};
pub use mask::{ParamCount, Technique, TrainabilityMask};

/// Closed-form number of scalars the extension adds:
/// `L * [3 * i * (d_model * d_k + d_k) + i * d_v * d_model + (d_model * a + a) + (a * d_model + d_model)]`,
/// with the FFN terms present only when `a > 0`.
pub fn extension_param_count(n_layers: usize, d_model: usize, d_k: usize, ext_heads: usize, ext_ffn: usize) -> usize {
    let attn = 3 * ext_heads * (d_model * d_k + d_k) + ext_heads * d_k * d_model;
    let ffn = if ext_ffn > 0 {
        (d_model * ext_ffn + ext_ffn) + (ext_ffn * d_model + d_model)
    } else {
        0
    };
    n_layers * (attn + ffn)
}
