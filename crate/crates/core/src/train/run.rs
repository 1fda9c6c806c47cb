use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batch_seed, group_sentences, wwm_collate, AnnotatedSequence, CollatedBatch};
use crate::error::{Error, Result};
use crate::model::{loss_and_gradients_for, EncoderWeights, Mode};
use crate::numerics::{Gradients, Real};
use crate::surgery::{Checkpoint, Technique, TrainabilityMask};

use super::config::{lr_at, TrainConfig};
use super::metrics::{MetricsLog, StepRecord};
use super::optim::{clip_grad_norm, AdamW};

/// One optimizer update from a group of micro-batches. Gradients are
/// averaged over the group; the returned loss is the mean micro-batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real>(
    weights: &mut EncoderWeights<T>,
    micro_batches: &[CollatedBatch],
    opt: &mut AdamW<T>,
    mask: &TrainabilityMask,
    lr: f64,
    clip_norm: Option<f64>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if micro_batches.is_empty() {
        return Err(Error::InvalidArgument("train_step needs at least one micro-batch".into()));
    }
    let mut total: Option<Gradients<T>> = None;
    let mut loss_sum = 0.0;
    for mb in micro_batches {
        let input = mb.input()?;
        let (loss, grads) = loss_and_gradients_for(
            weights,
            &input,
            &mb.labels,
            Mode::Train(dropout_rng),
            |n| mask.is_trainable(n),
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        loss_sum += loss.as_f64();
        match &mut total {
            Some(acc) => acc.accumulate(&grads),
            None => total = Some(grads),
        }
    }
    let k = micro_batches.len();
    let mut grads = total.expect("at least one micro-batch");
    if k > 1 {
        grads.scale(T::from_f64_lossy(1.0 / k as f64));
    }
    if let Some(c) = clip_norm {
        clip_grad_norm(&mut grads, c);
    }
    opt.step(weights, &grads, lr)?;
    Ok(loss_sum / k as f64)
}

/// Endless stream of collated micro-batches over packed sequences. Each epoch
/// is a fresh seeded shuffle; micro-batch `j` is collated with `batch_seed(seed, j)`.
pub struct MicroBatches {
    seqs: Vec<AnnotatedSequence>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    index: u64,
    seed: u64,
    batch_size: usize,
    mask_rate: f64,
    vocab_size: usize,
}

impl MicroBatches {
    pub fn new(
        seqs: Vec<AnnotatedSequence>,
        batch_size: usize,
        mask_rate: f64,
        seed: u64,
        vocab_size: usize,
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("micro_batch_size must be positive".into()));
        }
        let mut mb = MicroBatches {
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            index: 0,
            seed,
            batch_size,
            mask_rate,
            vocab_size,
            seqs,
        };
        mb.reshuffle();
        Ok(mb)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.seqs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed(self.seed ^ 0x5348_5546, self.epoch));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn next_batch(&mut self) -> Result<CollatedBatch> {
        let mut picked = Vec::with_capacity(self.batch_size);
        while picked.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            picked.push(self.seqs[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        let seed = batch_seed(self.seed, self.index);
        self.index += 1;
        wwm_collate(&picked, self.mask_rate, seed, self.vocab_size)
    }
}

/// Continual (or from-scratch) MLM pretraining of `ckpt` on raw sentences.
pub fn run_pretraining(
    ckpt: &Checkpoint,
    technique: Technique,
    sentences: &[AnnotatedSequence],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, MetricsLog)> {
    run_pretraining_with(ckpt, technique, sentences, cfg, |_| {})
}

/// [`run_pretraining`] with a callback after every update.
pub fn run_pretraining_with(
    ckpt: &Checkpoint,
    technique: Technique,
    sentences: &[AnnotatedSequence],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<(Checkpoint, MetricsLog)> {
    cfg.validate()?;
    let model_cfg = ckpt.config();
    if cfg.max_seq_len > model_cfg.max_seq_len {
        return Err(Error::Config(format!(
            "max_seq_len {} exceeds the model's position table of {}",
            cfg.max_seq_len, model_cfg.max_seq_len
        )));
    }
    let mask = ckpt.make_mask(technique)?;
    if !mask.any_trainable() {
        return Err(Error::NothingToTrain);
    }
    let packed = group_sentences(sentences, cfg.max_seq_len)?;
    let mut batches = MicroBatches::new(packed, cfg.micro_batch_size, cfg.mask_rate, cfg.seed, model_cfg.vocab_size)?;
    let mut weights = ckpt.weights.clone();
    let mut opt = AdamW::new(&weights, &mask, cfg)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(batch_seed(cfg.seed, u64::MAX));
    let mut log = MetricsLog::new(technique.as_str(), cfg.hash());
    let mut group = Vec::with_capacity(cfg.grad_accum_steps);
    for step in 0..cfg.total_steps {
        group.clear();
        for _ in 0..cfg.grad_accum_steps {
            group.push(batches.next_batch()?);
        }
        let lr = lr_at(step, cfg)?;
        let loss = train_step(&mut weights, &group, &mut opt, &mask, lr, cfg.clip_norm, &mut dropout_rng)?;
        let rec = StepRecord {
            step,
            lr,
            raw_loss: loss,
        };
        log.push(rec)?;
        on_step(&rec);
    }
    let out = Checkpoint {
        weights,
        mask,
        provenance: format!(
            "{technique}(steps={},seed={},config={}) <- {}",
            cfg.total_steps,
            cfg.seed,
            &log.meta.config_hash[..12],
            ckpt.provenance
        ),
    };
    Ok((out, log))
}
