//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. `backward` walks the nodes in reverse once and
//! returns one gradient per registered parameter.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};

use super::ops::{self, LayerNormCache};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Shape bookkeeping for the fused multi-head attention node. Rows of the
/// projected inputs are `batch * seq` positions; head `j` occupies columns
/// `j*d_k .. (j+1)*d_k` of the query/key matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, factor: T },
    ConcatCols { a: Var, b: Var },
    ConcatRows { a: Var, b: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, cache: LayerNormCache<T> },
    Embedding { table: Var, ids: Vec<u32> },
    GatherRows { x: Var, rows: Vec<usize> },
    Dropout { x: Var, keep: Vec<T> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
        keep: Option<Vec<T>>,
    },
    CrossEntropy { logits: Var, labels: Vec<i64>, ignore_index: i64, count: usize },
    Sum { x: Var },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::ConcatCols { a, b } | Op::ConcatRows { a, b } => {
                vec![*a, *b]
            }
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::GatherRows { x, .. }
            | Op::Dropout { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any trainable parameter reaches this node.
    requires: bool,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn from_map(grads: IndexMap<String, Tensor<T>>) -> Self {
        Gradients { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (name, g) in other.iter() {
            match self.grads.get_mut(name) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.grads.insert(name.to_string(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.values_mut() {
            g.scale_assign(factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// Recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
    frozen: IndexMap<String, Var>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: IndexMap::new(),
            frozen: IndexMap::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires = op.inputs().iter().any(|v| self.nodes[v.0].requires);
        self.nodes.push(Node { value, op, requires });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a named parameter. Registering the same name twice returns the original handle.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        if let Some(v) = self.param_var(name) {
            return v;
        }
        let v = self.leaf(value, true);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Registers a named parameter that receives no gradient. Its weight
    /// gradient is never computed and it is absent from `backward`'s result.
    pub fn frozen_param(&mut self, name: &str, value: Tensor<T>) -> Var {
        if let Some(v) = self.param_var(name) {
            return v;
        }
        let v = self.leaf(value, false);
        self.frozen.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).or_else(|| self.frozen.get(name)).copied()
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = ops::matmul_t(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(out, Op::MatMul { a, ta, b, tb }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Adds a vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let d = vx.last_dim();
        if vb.len() != d {
            return Err(Error::shape("add_row", format!("bias of {} for width {d}", vb.len())));
        }
        let mut out = vx.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, bias }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// Column-wise concatenation `[a : b]` (also joins two vectors end to end).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ConcatCols { a, b }))
    }

    /// Row-wise concatenation: `a` stacked on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_rows(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::ConcatRows { a, b }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        self.push(out, Op::Gelu { x })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, cache) = ops::layer_norm_cached(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, cache }))
    }

    /// Row lookup into an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = t.dims2("embedding")?;
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding lookup with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab_size: vocab });
            }
            data.extend_from_slice(t.row(id as usize));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }))
    }

    /// Selects rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2("gather_rows")?;
        if rows.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no rows".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("gather_rows", format!("row {r} of {n}")));
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Inverted dropout with a caller-supplied keep mask (entries `0` or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, keep: Vec<T>) -> Result<Var> {
        let vx = self.value(x);
        if keep.len() != vx.len() {
            return Err(Error::shape("dropout", format!("mask of {} for {} values", keep.len(), vx.len())));
        }
        let mut out = vx.clone();
        for (o, &k) in out.data_mut().iter_mut().zip(&keep) {
            *o *= k;
        }
        Ok(self.push(out, Op::Dropout { x, keep }))
    }

    /// Fused multi-head scaled dot-product attention over a batch of equal-length
    /// sequences. `key_mask` holds one additive logit per position (`batch * seq`);
    /// `prob_keep`, when present, is an inverted-dropout mask over the attention
    /// probabilities laid out as `[batch][head][query][key]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        key_mask: &[T],
        prob_keep: Option<Vec<T>>,
    ) -> Result<Var> {
        let AttentionLayout { batch, seq, heads, d_k, d_v } = layout;
        if d_k == 0 {
            return Err(Error::InvalidArgument("attention key width d_k is zero".into()));
        }
        let n = batch * seq;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let check = |t: &Tensor<T>, width: usize, what: &str| -> Result<()> {
            if t.shape() != [n, heads * width] {
                return Err(Error::shape(
                    "attention",
                    format!("{what} has shape {:?}, expected [{n}, {}]", t.shape(), heads * width),
                ));
            }
            Ok(())
        };
        check(vq, d_k, "queries")?;
        check(vk, d_k, "keys")?;
        check(vv, d_v, "values")?;
        if key_mask.len() != n {
            return Err(Error::shape(
                "attention",
                format!("mask of {} entries for {n} positions", key_mask.len()),
            ));
        }
        let block = seq * seq;
        if let Some(keep) = &prob_keep {
            if keep.len() != batch * heads * block {
                return Err(Error::shape("attention", "dropout mask size"));
            }
        }
        let scale = T::from_usize(d_k).unwrap().sqrt().recip();
        let (ldq, ldv) = (heads * d_k, heads * d_v);
        let mut probs = vec![T::zero(); batch * heads * block];
        let mut out = Tensor::zeros(&[n, ldv]);
        let mut dropped = vec![T::zero(); block];
        for b in 0..batch {
            let mask = &key_mask[b * seq..(b + 1) * seq];
            for h in 0..heads {
                let off = (b * heads + h) * block;
                let p = &mut probs[off..off + block];
                gemm(
                    scale,
                    ops::head_block(vq.data(), b, seq, ldq, h, d_k),
                    ops::head_block(vk.data(), b, seq, ldq, h, d_k).t(),
                    T::zero(),
                    MatMut { data: p, rows: seq, cols: seq, rs: seq, cs: 1 },
                );
                for row in p.chunks_mut(seq) {
                    for (s, &m) in row.iter_mut().zip(mask) {
                        *s += m;
                    }
                    ops::softmax_in_place(row);
                }
                let weights: &[T] = match &prob_keep {
                    Some(keep) => {
                        for ((d, &pv), &kv) in dropped.iter_mut().zip(p.iter()).zip(&keep[off..off + block]) {
                            *d = pv * kv;
                        }
                        &dropped
                    }
                    None => p,
                };
                gemm(
                    T::one(),
                    MatRef { data: weights, rows: seq, cols: seq, rs: seq, cs: 1 },
                    ops::head_block(vv.data(), b, seq, ldv, h, d_v),
                    T::zero(),
                    MatMut::block(out.data_mut(), b * seq * ldv + h * d_v, seq, d_v, ldv),
                );
            }
        }
        let out = out.check_finite("attention")?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                keep: prob_keep,
            },
        ))
    }

    /// Attention probabilities recorded by an attention node, `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[T], AttentionLayout)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, layout, .. } => Some((probs, *layout)),
            _ => None,
        }
    }

    /// Mean cross-entropy over rows whose label is not `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64], ignore_index: i64) -> Result<Var> {
        let loss = ops::cross_entropy_masked(self.value(logits), labels, ignore_index)?;
        let count = labels.iter().filter(|&&l| l != ignore_index).count();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore_index,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, g, &mut grads)?;
        }

        let mut out = IndexMap::with_capacity(self.params.len());
        for (name, &v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            out.insert(name.clone(), g);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, idx: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let accumulate = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| {
            if self.requires(v) {
                accumulate(grads, v, g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, ta, b, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires(*a) {
                    let da = if *ta {
                        ops::matmul_t(vb, *tb, &g, true)?
                    } else {
                        ops::matmul_t(&g, false, vb, !*tb)?
                    };
                    accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let db = if *tb {
                        ops::matmul_t(&g, true, va, *ta)?
                    } else {
                        ops::matmul_t(va, !*ta, &g, false)?
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g);
            }
            Op::AddRow { x, bias } => {
                let d = g.last_dim();
                let mut db = Tensor::zeros(self.value(*bias).shape());
                for row in g.data().chunks(d) {
                    for (acc, &v) in db.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *bias, db);
                accumulate(grads, *x, g);
            }
            Op::Scale { x, factor } => {
                let mut dx = g;
                dx.scale_assign(*factor);
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ca, cb) = (va.last_dim(), vb.last_dim());
                let mut da = Vec::with_capacity(va.len());
                let mut db = Vec::with_capacity(vb.len());
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            Op::ConcatRows { a, b } => {
                let va = self.value(*a);
                let split = va.len();
                let da = Tensor::new(va.shape().to_vec(), g.data()[..split].to_vec())?;
                let db = Tensor::new(self.value(*b).shape().to_vec(), g.data()[split..].to_vec())?;
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Gelu { x } => {
                let vx = self.value(*x);
                let mut dx = g;
                for (d, &xv) in dx.data_mut().iter_mut().zip(vx.data()) {
                    *d *= ops::gelu_grad_scalar(xv);
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let d = g.last_dim();
                let n = T::from_usize(d).unwrap();
                let gam = self.value(*gamma).data();
                let mut dgamma = Tensor::zeros(self.value(*gamma).shape());
                let mut dbeta = Tensor::zeros(self.value(*beta).shape());
                let mut dx = Tensor::zeros(g.shape());
                let mut dxhat = vec![T::zero(); d];
                for (r, (grow, dxrow)) in g.data().chunks(d).zip(dx.data_mut().chunks_mut(d)).enumerate() {
                    let xhat = &cache.normalized[r * d..(r + 1) * d];
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dgamma.data_mut()[j] += grow[j] * xhat[j];
                        dbeta.data_mut()[j] += grow[j];
                        dxhat[j] = grow[j] * gam[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat = mean_dxhat / n;
                    mean_dxhat_xhat = mean_dxhat_xhat / n;
                    let rstd = cache.rstd[r];
                    for j in 0..d {
                        dxrow[j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Embedding { table, ids } => {
                if !self.requires(*table) {
                    return Ok(());
                }
                let vt = self.value(*table);
                let d = vt.last_dim();
                let mut dt = Tensor::zeros(vt.shape());
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::GatherRows { x, rows } => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                let mut dx = Tensor::zeros(vx.shape());
                for (i, &r) in rows.iter().enumerate() {
                    let dst = &mut dx.data_mut()[r * d..(r + 1) * d];
                    for (o, &v) in dst.iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, keep } => {
                let mut dx = g;
                for (d, &k) in dx.data_mut().iter_mut().zip(keep) {
                    *d *= k;
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, layout, probs, keep } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *layout, probs, keep.as_deref(), &g);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::CrossEntropy { logits, labels, ignore_index, count } => {
                let vl = self.value(*logits);
                let vocab = vl.last_dim();
                let mut dl = Tensor::zeros(vl.shape());
                let factor = g.data()[0] / T::from_usize(*count).unwrap();
                for (r, &label) in labels.iter().enumerate() {
                    if label == *ignore_index {
                        continue;
                    }
                    let row = &mut dl.data_mut()[r * vocab..(r + 1) * vocab];
                    row.copy_from_slice(vl.row(r));
                    ops::softmax_in_place(row);
                    row[label as usize] -= T::one();
                    for v in row.iter_mut() {
                        *v *= factor;
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum { x } => {
                let dx = Tensor::full(self.value(*x).shape(), g.data()[0]);
                accumulate(grads, *x, dx);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: &[T],
        keep: Option<&[T]>,
        g: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let AttentionLayout { batch, seq, heads, d_k, d_v } = layout;
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let scale = T::from_usize(d_k).unwrap().sqrt().recip();
        let (ldq, ldv) = (heads * d_k, heads * d_v);
        let block = seq * seq;
        let mut dq = Tensor::zeros(vq.shape());
        let mut dk = Tensor::zeros(vk.shape());
        let mut dv = Tensor::zeros(vv.shape());
        let mut dp = vec![T::zero(); block];
        let mut weights = vec![T::zero(); block];
        for b in 0..batch {
            for h in 0..heads {
                let off = (b * heads + h) * block;
                let p = &probs[off..off + block];
                let go = ops::head_block(g.data(), b, seq, ldv, h, d_v);
                // Effective weights after dropout.
                match keep {
                    Some(keep) => {
                        for ((w, &pv), &kv) in weights.iter_mut().zip(p).zip(&keep[off..off + block]) {
                            *w = pv * kv;
                        }
                    }
                    None => weights.copy_from_slice(p),
                }
                // dV = W^T dO
                gemm(
                    T::one(),
                    MatRef { data: &weights, rows: seq, cols: seq, rs: seq, cs: 1 }.t(),
                    go,
                    T::zero(),
                    MatMut::block(dv.data_mut(), b * seq * ldv + h * d_v, seq, d_v, ldv),
                );
                // dW = dO V^T
                gemm(
                    T::one(),
                    go,
                    ops::head_block(vv.data(), b, seq, ldv, h, d_v).t(),
                    T::zero(),
                    MatMut { data: &mut dp, rows: seq, cols: seq, rs: seq, cs: 1 },
                );
                if let Some(keep) = keep {
                    for (d, &kv) in dp.iter_mut().zip(&keep[off..off + block]) {
                        *d *= kv;
                    }
                }
                // Softmax backward: dS = P * (dP - rowsum(dP * P)).
                for (drow, prow) in dp.chunks_mut(seq).zip(p.chunks(seq)) {
                    let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot);
                    }
                }
                let ds = MatRef { data: &dp, rows: seq, cols: seq, rs: seq, cs: 1 };
                gemm(
                    scale,
                    ds,
                    ops::head_block(vk.data(), b, seq, ldq, h, d_k),
                    T::zero(),
                    MatMut::block(dq.data_mut(), b * seq * ldq + h * d_k, seq, d_k, ldq),
                );
                gemm(
                    scale,
                    ds.t(),
                    ops::head_block(vq.data(), b, seq, ldq, h, d_k),
                    T::zero(),
                    MatMut::block(dk.data_mut(), b * seq * ldq + h * d_k, seq, d_k, ldq),
                );
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Inverted-dropout keep mask: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let kept = T::from_f64_lossy(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { kept })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::from_fn(&[2, 3], |i| i as f64));
        let unused = tape.param("unused", Tensor::ones(&[4]));
        let loss = tape.sum(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &Tensor::ones(&[2, 3]));
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(&[4]));
        let _ = unused;
    }

    #[test]
    fn tape_cannot_be_consumed_twice() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::ones(&[2]));
        let loss = tape.sum(w);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::ones(&[2]));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn shared_parameter_accumulates() {
        // loss = sum(w * w) via matmul of a row with its transpose.
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::from_slice_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = tape.matmul_t(w, false, w, true).unwrap();
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn dropout_mask_statistics() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mask: Vec<f64> = dropout_mask(20_000, 0.1, &mut rng);
        let dropped = mask.iter().filter(|&&m| m == 0.0).count() as f64 / 20_000.0;
        assert!((dropped - 0.1).abs() < 0.01);
        assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.9).abs() < 1e-15));
    }
}
