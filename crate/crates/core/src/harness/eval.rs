use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batch_seed, group_sentences, wwm_collate, AnnotatedSequence, CollatedBatch};
use crate::error::{Error, Result};
use crate::model::{logits_at, loss, EncoderWeights, IGNORE_INDEX};
use crate::numerics::Real;

/// How held-out text is turned into evaluation inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mask_rate: f64,
    pub seed: u64,
    pub max_seq_len: usize,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mask_rate: 0.15,
            seed: 7,
            max_seq_len: 64,
            batch_size: 32,
        }
    }
}

/// Held-out sentences collated once. Every model scored against the same
/// `EvalSet` sees byte-identical inputs.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub batches: Vec<CollatedBatch>,
    pub config: EvalConfig,
    pub sentences: usize,
    digest: [u8; 32],
}

impl EvalSet {
    pub fn new(heldout: &[AnnotatedSequence], config: &EvalConfig, vocab_size: usize) -> Result<Self> {
        if heldout.is_empty() {
            return Err(Error::InvalidArgument("held-out set is empty".into()));
        }
        if config.batch_size == 0 {
            return Err(Error::InvalidArgument("eval batch_size must be positive".into()));
        }
        let packed = group_sentences(heldout, config.max_seq_len)?;
        let batches = packed
            .chunks(config.batch_size)
            .enumerate()
            .map(|(i, chunk)| wwm_collate(chunk, config.mask_rate, batch_seed(config.seed, i as u64), vocab_size))
            .collect::<Result<Vec<_>>>()?;
        let mut h = Sha256::new();
        for b in &batches {
            h.update(b.digest());
        }
        Ok(EvalSet {
            batches,
            config: config.clone(),
            sentences: heldout.len(),
            digest: h.finalize().into(),
        })
    }

    /// SHA-256 over the collated inputs of every batch.
    pub fn digest(&self) -> [u8; 32] {
        self.digest
    }

    pub fn digest_hex(&self) -> String {
        crate::train::hex(&self.digest)
    }

    pub fn num_labels(&self) -> usize {
        self.batches.iter().map(CollatedBatch::num_labels).sum()
    }
}

fn labeled_rows(labels: &[i64]) -> (Vec<usize>, Vec<i64>) {
    labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_INDEX)
        .map(|(i, &l)| (i, l))
        .unzip()
}

/// Fraction of labeled positions whose argmax logit is the original token.
/// All three corruption classes count. Exact ties are broken uniformly with
/// a generator seeded from the evaluation seed.
pub fn masked_accuracy<T: Real>(weights: &EncoderWeights<T>, set: &EvalSet) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(set.config.seed);
    let mut correct = 0usize;
    let mut total = 0usize;
    for b in &set.batches {
        let (rows, targets) = labeled_rows(&b.labels);
        if rows.is_empty() {
            continue;
        }
        let logits = logits_at(weights, &b.input()?, &rows)?;
        for (r, &t) in targets.iter().enumerate() {
            if argmax_tiebreak(logits.row(r), &mut rng) == t as usize {
                correct += 1;
            }
        }
        total += rows.len();
    }
    if total == 0 {
        return Err(Error::NoLabels);
    }
    Ok(correct as f64 / total as f64)
}

/// Mean MLM cross-entropy over every labeled position of the set.
pub fn eval_loss<T: Real>(weights: &EncoderWeights<T>, set: &EvalSet) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in &set.batches {
        let n = b.num_labels();
        if n == 0 {
            continue;
        }
        sum += loss(weights, &b.input()?, &b.labels)?.as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::NoLabels);
    }
    Ok(sum / count as f64)
}

fn argmax_tiebreak<T: Real>(row: &[T], rng: &mut ChaCha8Rng) -> usize {
    let best = argmax(row);
    let ties = row.iter().filter(|&&v| v == row[best]).count();
    if ties == 1 {
        return best;
    }
    let pick = rng.random_range(0..ties);
    row.iter()
        .enumerate()
        .filter(|(_, &v)| v == row[best])
        .nth(pick)
        .map_or(best, |(i, _)| i)
}

/// First index of the largest value.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
