//! Forward pass of the extended encoder on a gradient tape.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{dropout_mask, AttentionLayout, Gradients, Real, Tape, Tensor, Var, MASKED_LOGIT};

use super::config::ModelConfig;
use super::weights::{
    EncoderView, EncoderWeights, ExtendedAttentionWeights, ExtendedFfnWeights, LayerNormWeights, LoraPair,
    MlmHeadWeights,
};
use super::LoraTarget;

/// Label value for positions that do not contribute to the MLM loss.
pub const IGNORE_INDEX: i64 = -100;

/// A batch of equal-length (padded) token sequences, flattened row-major.
#[derive(Clone, Copy, Debug)]
pub struct Input<'a> {
    pub ids: &'a [u32],
    /// 1 for real tokens, 0 for padding.
    pub attention_mask: &'a [u8],
    pub batch: usize,
    pub seq: usize,
}

impl<'a> Input<'a> {
    pub fn new(ids: &'a [u32], attention_mask: &'a [u8], batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::InvalidArgument("empty input batch".into()));
        }
        if ids.len() != batch * seq || attention_mask.len() != batch * seq {
            return Err(Error::shape(
                "input",
                format!(
                    "{} ids and {} mask entries for batch {batch} x seq {seq}",
                    ids.len(),
                    attention_mask.len()
                ),
            ));
        }
        Ok(Input {
            ids,
            attention_mask,
            batch,
            seq,
        })
    }

    /// Additive attention logits per key position.
    pub fn key_mask<T: Real>(&self) -> Vec<T> {
        let masked = T::from_f64_lossy(MASKED_LOGIT);
        self.attention_mask
            .iter()
            .map(|&m| if m != 0 { T::zero() } else { masked })
            .collect()
    }
}

/// Train mode draws dropout masks from the supplied generator; eval mode is deterministic.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

struct Dropout<'r> {
    p: f64,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    fn mask<T: Real>(&mut self, n: usize) -> Option<Vec<T>> {
        match &mut self.rng {
            Some(rng) if self.p > 0.0 => Some(dropout_mask(n, self.p, *rng)),
            _ => None,
        }
    }

    fn apply<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let n = tape.value(x).len();
        match self.mask(n) {
            Some(keep) => tape.dropout(x, keep),
            None => Ok(x),
        }
    }
}

/// Registers every weight on the tape and returns typed handles.
pub fn bind<T: Real>(tape: &mut Tape<T>, weights: &EncoderWeights<T>) -> Result<EncoderView<Var>> {
    bind_with(tape, weights, |_| true)
}

/// Like [`bind`], but weights for which `trainable` is false are registered
/// frozen and get no gradient.
pub fn bind_with<T: Real>(
    tape: &mut Tape<T>,
    weights: &EncoderWeights<T>,
    trainable: impl Fn(&str) -> bool,
) -> Result<EncoderView<Var>> {
    for (name, t) in weights.iter() {
        if trainable(name) {
            tape.param(name, t.clone());
        } else {
            tape.frozen_param(name, t.clone());
        }
    }
    EncoderView::resolve(weights.config(), |name| {
        tape.param_var(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    })
}

fn effective_weight<T: Real>(tape: &mut Tape<T>, base: Var, lora: Option<&LoraPair<Var>>, scaling: f64) -> Result<Var> {
    match lora {
        Some(pair) => {
            let delta = tape.matmul(pair.a, pair.b)?;
            let delta = tape.scale(delta, T::from_f64_lossy(scaling));
            tape.add(base, delta)
        }
        None => Ok(base),
    }
}

fn project<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Multi-head attention with `i` extra heads. Queries, keys and values come
/// from the column-wise concatenated projections `[W : W']`; the `h + i` head
/// outputs are projected back through the row-wise stack `[W_O ; W'_O]` plus
/// the inherited `b_O`.
#[allow(clippy::too_many_arguments)]
fn attention_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: &ExtendedAttentionWeights<Var>,
    cfg: &ModelConfig,
    batch: usize,
    seq: usize,
    key_mask: &[T],
    dropout: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    let scaling = cfg.lora.as_ref().map_or(0.0, |l| l.scaling());
    let lora_for = |target: LoraTarget| w.lora.iter().find(|(t, _)| *t == target).map(|(_, p)| p);

    let w_q = effective_weight(tape, w.w_q, lora_for(LoraTarget::WQ), scaling)?;
    let w_k = effective_weight(tape, w.w_k, lora_for(LoraTarget::WK), scaling)?;
    let w_v = effective_weight(tape, w.w_v, lora_for(LoraTarget::WV), scaling)?;
    let w_o = effective_weight(tape, w.w_o, lora_for(LoraTarget::WO), scaling)?;

    let (wq, wk, wv, bq, bk, bv, wo) = match &w.ext {
        Some(e) => (
            tape.concat_cols(w_q, e.w_q)?,
            tape.concat_cols(w_k, e.w_k)?,
            tape.concat_cols(w_v, e.w_v)?,
            tape.concat_cols(w.b_q, e.b_q)?,
            tape.concat_cols(w.b_k, e.b_k)?,
            tape.concat_cols(w.b_v, e.b_v)?,
            tape.concat_rows(w_o, e.w_o)?,
        ),
        None => (w_q, w_k, w_v, w.b_q, w.b_k, w.b_v, w_o),
    };
    let q = project(tape, x, wq, bq)?;
    let k = project(tape, x, wk, bk)?;
    let v = project(tape, x, wv, bv)?;
    let heads = if w.ext.is_some() { cfg.total_heads() } else { cfg.n_heads };
    let layout = AttentionLayout {
        batch,
        seq,
        heads,
        d_k: cfg.d_k(),
        d_v: cfg.d_v(),
    };
    let keep = dropout.mask(batch * heads * seq * seq);
    let ctx = tape.attention(q, k, v, layout, key_mask, keep)?;
    let out = project(tape, ctx, wo, w.b_o)?;
    Ok((out, ctx))
}

/// Extended attention on a single sequence `x` (`seq x d_model`) without dropout.
pub fn attention_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    w: &ExtendedAttentionWeights<Var>,
    cfg: &ModelConfig,
    attn_mask: &[u8],
) -> Result<Var> {
    let seq = tape.value(x).n_rows();
    if attn_mask.len() != seq {
        return Err(Error::shape(
            "attention_forward",
            format!("mask of {} for sequence of {seq}", attn_mask.len()),
        ));
    }
    let key_mask: Vec<T> = Input::new(&vec![0; seq], attn_mask, 1, seq)?.key_mask();
    let mut no_dropout = Dropout { p: 0.0, rng: None };
    attention_block(tape, x, w, cfg, 1, seq, &key_mask, &mut no_dropout).map(|(out, _)| out)
}

/// `GeLU(x [W_1 : W'_1] + [b_1 : b'_1]) [W_2 ; W'_2] + b_2 + b'_2`.
pub fn ffn_forward<T: Real>(tape: &mut Tape<T>, x: Var, w: &ExtendedFfnWeights<Var>) -> Result<Var> {
    let (w1, b1, w2) = match &w.ext {
        Some(e) => (
            tape.concat_cols(w.w_1, e.w_1)?,
            tape.concat_cols(w.b_1, e.b_1)?,
            tape.concat_rows(w.w_2, e.w_2)?,
        ),
        None => (w.w_1, w.b_1, w.w_2),
    };
    let hidden = project(tape, x, w1, b1)?;
    let hidden = tape.gelu(hidden);
    let out = project(tape, hidden, w2, w.b_2)?;
    match &w.ext {
        Some(e) => tape.add_row(out, e.b_2),
        None => Ok(out),
    }
}

fn norm<T: Real>(tape: &mut Tape<T>, x: Var, ln: &LayerNormWeights<Var>, eps: f64) -> Result<Var> {
    tape.layer_norm(x, ln.gamma, ln.beta, eps)
}

/// Handles to the intermediate results of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Final hidden states, `(batch * seq) x d_model`.
    pub hidden: Var,
    /// Hidden states after each layer.
    pub layer_outputs: Vec<Var>,
    /// Concatenated head outputs of each attention block; the node also
    /// carries the attention probabilities.
    pub attention: Vec<Var>,
}

/// Embeddings (token + learned position, layer norm, dropout) followed by
/// `n_layers` post-LN blocks: `x <- LN(x + Attn(x)); x <- LN(x + FFN(x))`.
pub fn encoder_forward<T: Real>(
    tape: &mut Tape<T>,
    view: &EncoderView<Var>,
    cfg: &ModelConfig,
    input: &Input<'_>,
    mode: Mode<'_>,
) -> Result<EncoderOutput> {
    if input.seq > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: input.seq,
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = input.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    let mut dropout = Dropout {
        p: cfg.dropout_p,
        rng: match mode {
            Mode::Train(rng) => Some(rng),
            Mode::Eval => None,
        },
    };
    let key_mask: Vec<T> = input.key_mask();
    let positions: Vec<u32> = (0..input.batch).flat_map(|_| 0..input.seq as u32).collect();

    let tok = tape.embedding(view.token_embeddings, input.ids)?;
    let pos = tape.embedding(view.position_embeddings, &positions)?;
    let x = tape.add(tok, pos)?;
    let x = norm(tape, x, &view.embedding_ln, cfg.ln_eps)?;
    let mut x = dropout.apply(tape, x)?;

    let mut layer_outputs = Vec::with_capacity(view.layers.len());
    let mut attention = Vec::with_capacity(view.layers.len());
    for layer in &view.layers {
        let (attn, ctx) = attention_block(tape, x, &layer.attn, cfg, input.batch, input.seq, &key_mask, &mut dropout)?;
        let attn = dropout.apply(tape, attn)?;
        let res = tape.add(x, attn)?;
        x = norm(tape, res, &layer.attn_ln, cfg.ln_eps)?;

        let ffn = ffn_forward(tape, x, &layer.ffn)?;
        let ffn = dropout.apply(tape, ffn)?;
        let res = tape.add(x, ffn)?;
        x = norm(tape, res, &layer.ffn_ln, cfg.ln_eps)?;
        layer_outputs.push(x);
        attention.push(ctx);
    }
    Ok(EncoderOutput {
        hidden: x,
        layer_outputs,
        attention,
    })
}

/// MLM head: dense + GeLU + layer norm, then the tied token-embedding
/// projection plus a free output bias.
pub fn mlm_logits<T: Real>(
    tape: &mut Tape<T>,
    view: &EncoderView<Var>,
    cfg: &ModelConfig,
    hidden: Var,
) -> Result<Var> {
    let MlmHeadWeights {
        transform_w,
        transform_b,
        ln,
        output_bias,
    } = view.mlm;
    let t = project(tape, hidden, transform_w, transform_b)?;
    let t = tape.gelu(t);
    let t = norm(tape, t, &ln, cfg.ln_eps)?;
    let logits = tape.matmul_t(t, false, view.token_embeddings, true)?;
    tape.add_row(logits, output_bias)
}

/// Mean cross-entropy over labeled positions. Only labeled rows go through
/// the head, which yields the same loss as scoring every position.
pub fn mlm_loss<T: Real>(
    tape: &mut Tape<T>,
    view: &EncoderView<Var>,
    cfg: &ModelConfig,
    hidden: Var,
    labels: &[i64],
) -> Result<Var> {
    let rows: Vec<usize> = labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_INDEX)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::NoLabels);
    }
    let targets: Vec<i64> = rows.iter().map(|&r| labels[r]).collect();
    let selected = tape.gather_rows(hidden, &rows)?;
    let logits = mlm_logits(tape, view, cfg, selected)?;
    tape.cross_entropy(logits, &targets, IGNORE_INDEX)
}

/// Final hidden states in eval mode.
pub fn encode<T: Real>(weights: &EncoderWeights<T>, input: &Input<'_>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let view = bind(&mut tape, weights)?;
    let out = encoder_forward(&mut tape, &view, weights.config(), input, Mode::Eval)?;
    Ok(tape.value(out.hidden).clone())
}

/// Hidden states after every layer, eval mode.
pub fn encode_layers<T: Real>(weights: &EncoderWeights<T>, input: &Input<'_>) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let view = bind(&mut tape, weights)?;
    let out = encoder_forward(&mut tape, &view, weights.config(), input, Mode::Eval)?;
    Ok(out.layer_outputs.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Full `(batch * seq) x vocab` logits in eval mode.
pub fn logits<T: Real>(weights: &EncoderWeights<T>, input: &Input<'_>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let view = bind(&mut tape, weights)?;
    let cfg = weights.config();
    let out = encoder_forward(&mut tape, &view, cfg, input, Mode::Eval)?;
    let logits = mlm_logits(&mut tape, &view, cfg, out.hidden)?;
    Ok(tape.value(logits).clone())
}

/// Logits for a chosen subset of positions, eval mode.
pub fn logits_at<T: Real>(weights: &EncoderWeights<T>, input: &Input<'_>, rows: &[usize]) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let view = bind(&mut tape, weights)?;
    let cfg = weights.config();
    let out = encoder_forward(&mut tape, &view, cfg, input, Mode::Eval)?;
    let selected = tape.gather_rows(out.hidden, rows)?;
    let logits = mlm_logits(&mut tape, &view, cfg, selected)?;
    Ok(tape.value(logits).clone())
}

/// MLM loss and its gradient with respect to every weight.
pub fn loss_and_gradients<T: Real>(
    weights: &EncoderWeights<T>,
    input: &Input<'_>,
    labels: &[i64],
    mode: Mode<'_>,
) -> Result<(T, Gradients<T>)> {
    loss_and_gradients_for(weights, input, labels, mode, |_| true)
}

/// MLM loss and gradients for the weights selected by `trainable` only.
pub fn loss_and_gradients_for<T: Real>(
    weights: &EncoderWeights<T>,
    input: &Input<'_>,
    labels: &[i64],
    mode: Mode<'_>,
    trainable: impl Fn(&str) -> bool,
) -> Result<(T, Gradients<T>)> {
    let mut tape = Tape::new();
    let view = bind_with(&mut tape, weights, trainable)?;
    let cfg = weights.config();
    let out = encoder_forward(&mut tape, &view, cfg, input, mode)?;
    let loss = mlm_loss(&mut tape, &view, cfg, out.hidden, labels)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// MLM loss without gradients (eval mode).
pub fn loss<T: Real>(weights: &EncoderWeights<T>, input: &Input<'_>, labels: &[i64]) -> Result<T> {
    let mut tape = Tape::new();
    let view = bind(&mut tape, weights)?;
    let cfg = weights.config();
    let out = encoder_forward(&mut tape, &view, cfg, input, Mode::Eval)?;
    let loss = mlm_loss(&mut tape, &view, cfg, out.hidden, labels)?;
    Ok(tape.value(loss).data()[0])
}
