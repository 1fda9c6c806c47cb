//! BERT-style encoder whose attention blocks can carry extra heads and whose
//! FFN blocks can carry extra hidden units. With no extension the forward
//! pass is exactly the base architecture.

mod config;
mod forward;
mod weights;

pub use config::{LoraConfig, LoraTarget, ModelConfig};
pub use forward::{
    attention_forward, bind, bind_with, encode, encode_layers, encoder_forward, ffn_forward, logits, logits_at,
    loss, loss_and_gradients, loss_and_gradients_for, mlm_logits, mlm_loss, EncoderOutput, Input, Mode, IGNORE_INDEX,
};
pub use weights::{
    layer_param, lora_param, schema, AttentionExtension, EncoderView, EncoderWeights, ExtendedAttentionWeights,
    ExtendedFfnWeights, FfnExtension, LayerNormWeights, LayerWeights, LoraPair, MlmHeadWeights, ParamGroup,
    ParamKind, ParamSpec, INIT_STD,
};
