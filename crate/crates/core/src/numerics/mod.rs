//! Dense tensors, pure kernels, and a tape-based reverse-mode engine.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{
    attention_probs, cross_entropy_masked, gelu, layer_norm, matmul, matmul_t, scaled_dot_attention, softmax_rows,
    MASKED_LOGIT,
};
pub use tape::{dropout_mask, AttentionLayout, Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
