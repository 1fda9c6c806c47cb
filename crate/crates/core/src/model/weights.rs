//! Parameter schema, storage, and typed views of the encoder weights.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

use super::config::{LoraTarget, ModelConfig};

/// Standard deviation used for every randomly initialized matrix.
pub const INIT_STD: f64 = 0.02;

/// Where a tensor comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Part of the general-domain model.
    Inherited,
    /// Added domain-specific heads / hidden units.
    Extension,
    /// Low-rank adapter factors.
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Bias,
    NormGain,
    NormBias,
}

impl ParamKind {
    /// Weight decay applies to matrices only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Matrix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn layer_param(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

pub fn lora_param(layer: usize, target: LoraTarget, factor: char) -> String {
    layer_param(layer, &format!("attn.lora.{}.{factor}", target.tensor()))
}

/// Every tensor the config implies, in canonical order.
pub fn schema(cfg: &ModelConfig) -> Vec<ParamSpec> {
    use ParamGroup::*;
    use ParamKind::*;
    let d = cfg.d_model;
    let (dk, dv) = (cfg.d_k(), cfg.d_v());
    let (h, i, a) = (cfg.n_heads, cfg.ext_heads, cfg.ext_ffn);
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, group, kind| out.push(ParamSpec { name, shape, group, kind });

    push("embeddings.token".into(), vec![cfg.vocab_size, d], Inherited, Matrix);
    push("embeddings.position".into(), vec![cfg.max_seq_len, d], Inherited, Matrix);
    push("embeddings.ln.gamma".into(), vec![d], Inherited, NormGain);
    push("embeddings.ln.beta".into(), vec![d], Inherited, NormBias);

    for l in 0..cfg.n_layers {
        let p = |s: &str| layer_param(l, s);
        push(p("attn.w_q"), vec![d, h * dk], Inherited, Matrix);
        push(p("attn.w_k"), vec![d, h * dk], Inherited, Matrix);
        push(p("attn.w_v"), vec![d, h * dv], Inherited, Matrix);
        push(p("attn.b_q"), vec![h * dk], Inherited, Bias);
        push(p("attn.b_k"), vec![h * dk], Inherited, Bias);
        push(p("attn.b_v"), vec![h * dv], Inherited, Bias);
        push(p("attn.w_o"), vec![h * dv, d], Inherited, Matrix);
        push(p("attn.b_o"), vec![d], Inherited, Bias);
        if i > 0 {
            push(p("attn.ext.w_q"), vec![d, i * dk], Extension, Matrix);
            push(p("attn.ext.w_k"), vec![d, i * dk], Extension, Matrix);
            push(p("attn.ext.w_v"), vec![d, i * dv], Extension, Matrix);
            push(p("attn.ext.b_q"), vec![i * dk], Extension, Bias);
            push(p("attn.ext.b_k"), vec![i * dk], Extension, Bias);
            push(p("attn.ext.b_v"), vec![i * dv], Extension, Bias);
            push(p("attn.ext.w_o"), vec![i * dv, d], Extension, Matrix);
        }
        if let Some(lora) = &cfg.lora {
            for target in LoraTarget::ALL {
                if !lora.has(target) {
                    continue;
                }
                let (rows, cols) = match target {
                    LoraTarget::WO => (h * dv, d),
                    LoraTarget::WV => (d, h * dv),
                    _ => (d, h * dk),
                };
                push(lora_param(l, target, 'a'), vec![rows, lora.rank], Lora, Matrix);
                push(lora_param(l, target, 'b'), vec![lora.rank, cols], Lora, Matrix);
            }
        }
        push(p("attn_ln.gamma"), vec![d], Inherited, NormGain);
        push(p("attn_ln.beta"), vec![d], Inherited, NormBias);
        push(p("ffn.w_1"), vec![d, cfg.d_ff], Inherited, Matrix);
        push(p("ffn.b_1"), vec![cfg.d_ff], Inherited, Bias);
        push(p("ffn.w_2"), vec![cfg.d_ff, d], Inherited, Matrix);
        push(p("ffn.b_2"), vec![d], Inherited, Bias);
        if a > 0 {
            push(p("ffn.ext.w_1"), vec![d, a], Extension, Matrix);
            push(p("ffn.ext.b_1"), vec![a], Extension, Bias);
            push(p("ffn.ext.w_2"), vec![a, d], Extension, Matrix);
            push(p("ffn.ext.b_2"), vec![d], Extension, Bias);
        }
        push(p("ffn_ln.gamma"), vec![d], Inherited, NormGain);
        push(p("ffn_ln.beta"), vec![d], Inherited, NormBias);
    }

    push("mlm.transform.w".into(), vec![d, d], Inherited, Matrix);
    push("mlm.transform.b".into(), vec![d], Inherited, Bias);
    push("mlm.ln.gamma".into(), vec![d], Inherited, NormGain);
    push("mlm.ln.beta".into(), vec![d], Inherited, NormBias);
    push("mlm.output_bias".into(), vec![cfg.vocab_size], Inherited, Bias);
    out
}

/// All encoder tensors, stored by name in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T = f32> {
    config: ModelConfig,
    tensors: IndexMap<String, Tensor<T>>,
}

impl<T: Real> EncoderWeights<T> {
    /// BERT-style initialization: matrices ~ N(0, 0.02^2), biases zero,
    /// layer-norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut tensors = IndexMap::new();
        for spec in schema(config) {
            let t = match spec.kind {
                ParamKind::Matrix => Tensor::from_fn(&spec.shape, |_| T::from_f64_lossy(normal.sample(&mut rng))),
                ParamKind::NormGain => Tensor::ones(&spec.shape),
                ParamKind::Bias | ParamKind::NormBias => Tensor::zeros(&spec.shape),
            };
            tensors.insert(spec.name, t);
        }
        Ok(EncoderWeights {
            config: config.clone(),
            tensors,
        })
    }

    /// Assembles weights from named tensors, checking them against the schema.
    /// The result is stored in schema order regardless of input order.
    pub fn from_tensors(config: ModelConfig, mut named: IndexMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let mut tensors = IndexMap::with_capacity(named.len());
        for spec in schema(&config) {
            let t = named
                .shift_remove(&spec.name)
                .ok_or_else(|| Error::MissingTensor(spec.name.clone()))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: spec.name,
                    found: t.shape().to_vec(),
                    expected: spec.shape,
                });
            }
            tensors.insert(spec.name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::UnexpectedTensor(extra.clone()));
        }
        Ok(EncoderWeights { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn into_parts(self) -> (ModelConfig, IndexMap<String, Tensor<T>>) {
        (self.config, self.tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            config: self.config.clone(),
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

// Typed views. `H` is a handle: `&Tensor` for direct inspection or a tape
// `Var` inside a forward pass.

#[derive(Clone, Copy, Debug)]
pub struct AttentionExtension<H> {
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    pub b_q: H,
    pub b_k: H,
    pub b_v: H,
    pub w_o: H,
}

#[derive(Clone, Copy, Debug)]
pub struct LoraPair<H> {
    pub a: H,
    pub b: H,
}

#[derive(Clone, Debug)]
pub struct ExtendedAttentionWeights<H> {
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    pub b_q: H,
    pub b_k: H,
    pub b_v: H,
    pub w_o: H,
    pub b_o: H,
    /// Present when `ext_heads > 0`. There is no extension output bias.
    pub ext: Option<AttentionExtension<H>>,
    pub lora: Vec<(LoraTarget, LoraPair<H>)>,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnExtension<H> {
    pub w_1: H,
    pub b_1: H,
    pub w_2: H,
    pub b_2: H,
}

#[derive(Clone, Copy, Debug)]
pub struct ExtendedFfnWeights<H> {
    pub w_1: H,
    pub b_1: H,
    pub w_2: H,
    pub b_2: H,
    /// Present when `ext_ffn > 0`.
    pub ext: Option<FfnExtension<H>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormWeights<H> {
    pub gamma: H,
    pub beta: H,
}

#[derive(Clone, Debug)]
pub struct LayerWeights<H> {
    pub attn: ExtendedAttentionWeights<H>,
    pub attn_ln: LayerNormWeights<H>,
    pub ffn: ExtendedFfnWeights<H>,
    pub ffn_ln: LayerNormWeights<H>,
}

#[derive(Clone, Copy, Debug)]
pub struct MlmHeadWeights<H> {
    pub transform_w: H,
    pub transform_b: H,
    pub ln: LayerNormWeights<H>,
    pub output_bias: H,
}

#[derive(Clone, Debug)]
pub struct EncoderView<H> {
    pub token_embeddings: H,
    pub position_embeddings: H,
    pub embedding_ln: LayerNormWeights<H>,
    pub layers: Vec<LayerWeights<H>>,
    pub mlm: MlmHeadWeights<H>,
}

impl<H: Copy> EncoderView<H> {
    /// Resolves every tensor name through `lookup`.
    pub fn resolve(cfg: &ModelConfig, mut lookup: impl FnMut(&str) -> Result<H>) -> Result<Self> {
        let ln = |prefix: &str, lookup: &mut dyn FnMut(&str) -> Result<H>| -> Result<LayerNormWeights<H>> {
            Ok(LayerNormWeights {
                gamma: lookup(&format!("{prefix}.gamma"))?,
                beta: lookup(&format!("{prefix}.beta"))?,
            })
        };
        let token_embeddings = lookup("embeddings.token")?;
        let position_embeddings = lookup("embeddings.position")?;
        let embedding_ln = ln("embeddings.ln", &mut lookup)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mut g = |s: &str| lookup(&layer_param(l, s));
            let ext = if cfg.ext_heads > 0 {
                Some(AttentionExtension {
                    w_q: g("attn.ext.w_q")?,
                    w_k: g("attn.ext.w_k")?,
                    w_v: g("attn.ext.w_v")?,
                    b_q: g("attn.ext.b_q")?,
                    b_k: g("attn.ext.b_k")?,
                    b_v: g("attn.ext.b_v")?,
                    w_o: g("attn.ext.w_o")?,
                })
            } else {
                None
            };
            let mut lora = Vec::new();
            if let Some(lcfg) = &cfg.lora {
                for target in LoraTarget::ALL.into_iter().filter(|t| lcfg.has(*t)) {
                    let a = lookup(&lora_param(l, target, 'a'))?;
                    let b = lookup(&lora_param(l, target, 'b'))?;
                    lora.push((target, LoraPair { a, b }));
                }
            }
            let mut g = |s: &str| lookup(&layer_param(l, s));
            let attn = ExtendedAttentionWeights {
                w_q: g("attn.w_q")?,
                w_k: g("attn.w_k")?,
                w_v: g("attn.w_v")?,
                b_q: g("attn.b_q")?,
                b_k: g("attn.b_k")?,
                b_v: g("attn.b_v")?,
                w_o: g("attn.w_o")?,
                b_o: g("attn.b_o")?,
                ext,
                lora,
            };
            let ffn = ExtendedFfnWeights {
                w_1: g("ffn.w_1")?,
                b_1: g("ffn.b_1")?,
                w_2: g("ffn.w_2")?,
                b_2: g("ffn.b_2")?,
                ext: if cfg.ext_ffn > 0 {
                    Some(FfnExtension {
                        w_1: g("ffn.ext.w_1")?,
                        b_1: g("ffn.ext.b_1")?,
                        w_2: g("ffn.ext.w_2")?,
                        b_2: g("ffn.ext.b_2")?,
                    })
                } else {
                    None
                },
            };
            let attn_ln = ln(&layer_param(l, "attn_ln"), &mut lookup)?;
            let ffn_ln = ln(&layer_param(l, "ffn_ln"), &mut lookup)?;
            layers.push(LayerWeights { attn, attn_ln, ffn, ffn_ln });
        }
        let mlm = MlmHeadWeights {
            transform_w: lookup("mlm.transform.w")?,
            transform_b: lookup("mlm.transform.b")?,
            ln: ln("mlm.ln", &mut lookup)?,
            output_bias: lookup("mlm.output_bias")?,
        };
        Ok(EncoderView {
            token_embeddings,
            position_embeddings,
            embedding_ln,
            layers,
            mlm,
        })
    }
}

impl<T: Real> EncoderWeights<T> {
    pub fn view(&self) -> Result<EncoderView<&Tensor<T>>> {
        EncoderView::resolve(&self.config, |name| self.tensor(name))
    }
}
