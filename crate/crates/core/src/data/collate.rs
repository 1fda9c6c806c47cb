use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Input, IGNORE_INDEX};

use super::corpus::AnnotatedSequence;
use super::vocab::{MASK, NUM_SPECIAL, PAD};

/// What happened to one selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    Masked,
    Unchanged,
    Random,
}

/// Padded batch after whole-word masking. Row-major `batch x seq`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CollatedBatch {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i64>,
    pub attention_mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
    /// Corruption class of each labeled position, in row-major order.
    pub corruption: Vec<Corruption>,
}

impl CollatedBatch {
    pub fn input(&self) -> Result<Input<'_>> {
        Input::new(&self.input_ids, &self.attention_mask, self.batch, self.seq)
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }

    /// SHA-256 over ids, labels and mask; equal digests mean identical inputs.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.batch as u64).to_le_bytes());
        h.update((self.seq as u64).to_le_bytes());
        for &id in &self.input_ids {
            h.update(id.to_le_bytes());
        }
        for &l in &self.labels {
            h.update(l.to_le_bytes());
        }
        h.update(&self.attention_mask);
        h.finalize().into()
    }
}

/// Whole-word masking. Word spans of each sequence are shuffled and taken
/// until the selected token count reaches `ceil(mask_rate * maskable)`; every
/// token of a chosen word becomes `[MASK]` (80%), stays (10%) or is replaced
/// by a uniformly drawn non-special token (10%).
pub fn wwm_collate(seqs: &[AnnotatedSequence], mask_rate: f64, seed: u64, vocab_size: usize) -> Result<CollatedBatch> {
    if seqs.is_empty() {
        return Err(Error::InvalidArgument("cannot collate an empty batch".into()));
    }
    if !(0.0..1.0).contains(&mask_rate) {
        return Err(Error::InvalidArgument(format!("mask_rate {mask_rate} outside [0, 1)")));
    }
    if vocab_size <= NUM_SPECIAL as usize {
        return Err(Error::InvalidArgument("vocabulary has no ordinary tokens".into()));
    }
    let seq = seqs.iter().map(AnnotatedSequence::len).max().unwrap_or(0).max(1);
    let batch = seqs.len();
    let mut input_ids = vec![PAD; batch * seq];
    let mut labels = vec![IGNORE_INDEX; batch * seq];
    let mut attention_mask = vec![0u8; batch * seq];
    let mut selected = vec![false; batch * seq];
    let mut class = vec![Corruption::Masked; batch * seq];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (b, s) in seqs.iter().enumerate() {
        let row = b * seq;
        for (p, &id) in s.ids.iter().enumerate() {
            if id as usize >= vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
            input_ids[row + p] = id;
            attention_mask[row + p] = 1;
        }
        let maskable: usize = s.spans.iter().map(|&(a, e)| e - a).sum();
        let quota = (mask_rate * maskable as f64).ceil() as usize;
        let mut order: Vec<usize> = (0..s.spans.len()).collect();
        order.shuffle(&mut rng);
        let mut chosen = 0;
        for w in order {
            if chosen >= quota {
                break;
            }
            let (a, e) = s.spans[w];
            for p in a..e {
                let i = row + p;
                selected[i] = true;
                labels[i] = i64::from(s.ids[p]);
                let u: f64 = rng.random();
                if u < 0.8 {
                    input_ids[i] = MASK;
                    class[i] = Corruption::Masked;
                } else if u < 0.9 {
                    class[i] = Corruption::Unchanged;
                } else {
                    input_ids[i] = rng.random_range(NUM_SPECIAL..vocab_size as u32);
                    class[i] = Corruption::Random;
                }
            }
            chosen += e - a;
        }
    }
    let corruption = selected.iter().zip(&class).filter(|(s, _)| **s).map(|(_, &c)| c).collect();
    Ok(CollatedBatch {
        input_ids,
        labels,
        attention_mask,
        batch,
        seq,
        corruption,
    })
}

/// Per-batch seed derived from a run seed, so batches can be collated in any order.
pub fn batch_seed(base_seed: u64, batch_index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(batch_index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::vocab::{CLS, SEP};

    fn seq_with_words(words: &[&[u32]]) -> AnnotatedSequence {
        let mut s = AnnotatedSequence::from_words(words.iter().copied());
        s.ids.insert(0, CLS);
        s.ids.push(SEP);
        for sp in &mut s.spans {
            sp.0 += 1;
            sp.1 += 1;
        }
        s
    }

    #[test]
    fn zero_rate_leaves_input_unchanged() {
        let s = seq_with_words(&[&[10, 11], &[12]]);
        let b = wwm_collate(std::slice::from_ref(&s), 0.0, 1, 20).unwrap();
        assert_eq!(b.input_ids, s.ids);
        assert_eq!(b.num_labels(), 0);
    }

    #[test]
    fn whole_word_is_labeled() {
        let s = seq_with_words(&[&[10, 11, 12]]);
        let b = wwm_collate(&[s], 0.15, 3, 20).unwrap();
        assert_eq!(b.labels, vec![IGNORE_INDEX, 10, 11, 12, IGNORE_INDEX]);
    }

    #[test]
    fn padding_and_mask() {
        let a = seq_with_words(&[&[10], &[11]]);
        let b = seq_with_words(&[&[12]]);
        let c = wwm_collate(&[a, b], 0.15, 0, 20).unwrap();
        assert_eq!(c.seq, 4);
        assert_eq!(c.attention_mask, vec![1, 1, 1, 1, 1, 1, 1, 0]);
        assert_eq!(c.input_ids[7], PAD);
        assert_eq!(c.labels[7], IGNORE_INDEX);
    }

    #[test]
    fn pure_function_of_seed() {
        let s = seq_with_words(&[&[10, 11], &[12], &[13, 14], &[15]]);
        let seqs = vec![s; 8];
        let a = wwm_collate(&seqs, 0.3, 42, 30).unwrap();
        assert_eq!(a, wwm_collate(&seqs, 0.3, 42, 30).unwrap());
        assert_eq!(a.digest(), wwm_collate(&seqs, 0.3, 42, 30).unwrap().digest());
        assert_ne!(batch_seed(1, 0), batch_seed(1, 1));
    }

    #[test]
    fn bad_arguments() {
        let s = seq_with_words(&[&[10]]);
        assert!(wwm_collate(&[], 0.15, 0, 20).is_err());
        assert!(wwm_collate(std::slice::from_ref(&s), 1.0, 0, 20).is_err());
        assert!(matches!(wwm_collate(&[s], 0.15, 0, 8), Err(Error::TokenOutOfRange { .. })));
    }
}
