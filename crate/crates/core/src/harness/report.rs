use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::AnnotatedSequence;
use crate::error::{Error, Result};
use crate::model::{LoraTarget, ModelConfig};
use crate::surgery::{extend_checkpoint, lora_attach, Checkpoint, InitPolicy, Technique, DEFAULT_LORA_TARGETS};
use crate::train::{MetricsLog, TrainConfig};

use super::eval::{eval_loss, masked_accuracy, EvalConfig, EvalSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub model: String,
    pub accuracy: f64,
    /// `accuracy - reference accuracy`; zero on the reference row.
    pub diff: f64,
}

/// General-domain masked-token accuracy of several models against a reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingReport {
    pub rows: Vec<ForgettingRow>,
    pub eval: EvalConfig,
    pub sentences: usize,
    pub labeled_positions: usize,
    pub input_digest: String,
}

impl ForgettingReport {
    /// Columns: `model`, `accuracy_pct` (0 to 100), `diff_pct` (percentage points vs the reference row).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,accuracy_pct,diff_pct\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.3},{:.3}", r.model, 100.0 * r.accuracy, 100.0 * r.diff);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>9}  {:>8}\n", "Model", "Accuracy", "Diff");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>8.3}%  {:>+8.3}",
                r.model,
                100.0 * r.accuracy,
                100.0 * r.diff
            );
        }
        let _ = writeln!(
            out,
            "({} held-out sentences, {} labeled positions, mask_rate {}, seed {})",
            self.sentences, self.labeled_positions, self.eval.mask_rate, self.eval.seed
        );
        out
    }
}

/// Checks that two checkpoints can be scored on the same inputs.
pub fn check_compatible(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if a.vocab_size != b.vocab_size {
        return Err(Error::VocabMismatch(format!(
            "vocabulary sizes {} and {} differ",
            a.vocab_size, b.vocab_size
        )));
    }
    let core = |c: &ModelConfig| (c.n_layers, c.d_model, c.n_heads, c.d_ff, c.max_seq_len);
    if core(a) != core(b) {
        return Err(Error::Config(format!(
            "core dimensions differ: (layers, d_model, heads, d_ff, max_seq_len) {:?} vs {:?}",
            core(a),
            core(b)
        )));
    }
    Ok(())
}

/// Scores `base` and each tuned checkpoint on one cached evaluation set.
pub fn forgetting_report(base: &Checkpoint, tuned: &[(String, Checkpoint)], set: &EvalSet) -> Result<ForgettingReport> {
    for (tag, ck) in tuned {
        check_compatible(base.config(), ck.config()).map_err(|e| match e {
            Error::VocabMismatch(m) => Error::VocabMismatch(format!("`{tag}`: {m}")),
            Error::Config(m) => Error::Config(format!("`{tag}`: {m}")),
            other => other,
        })?;
    }
    let reference = masked_accuracy(&base.weights, set)?;
    let mut rows = vec![ForgettingRow {
        model: "base".into(),
        accuracy: reference,
        diff: 0.0,
    }];
    for (tag, ck) in tuned {
        let acc = masked_accuracy(&ck.weights, set)?;
        rows.push(ForgettingRow {
            model: tag.clone(),
            accuracy: acc,
            diff: acc - reference,
        });
    }
    Ok(ForgettingReport {
        rows,
        eval: set.config.clone(),
        sentences: set.sentences,
        labeled_positions: set.num_labels(),
        input_digest: set.digest_hex(),
    })
}

/// Settings for one technique comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub train: TrainConfig,
    pub techniques: Vec<Technique>,
    pub ext_heads: usize,
    pub ext_ffn: usize,
    pub init: InitPolicy,
    pub init_seed: u64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<LoraTarget>,
    pub eval: EvalConfig,
    /// Trailing sentences of the domain corpus held out for the domain loss.
    pub domain_eval_sentences: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            train: TrainConfig {
                total_steps: 1000,
                warmup_steps: 100,
                micro_batch_size: 16,
                grad_accum_steps: 1,
                max_seq_len: 64,
                peak_lr: 1e-3,
                ..TrainConfig::default()
            },
            techniques: Technique::ALL.to_vec(),
            ext_heads: 1,
            ext_ffn: 32,
            init: InitPolicy::ZeroOutput,
            init_seed: 1,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_targets: DEFAULT_LORA_TARGETS.to_vec(),
            eval: EvalConfig::default(),
            domain_eval_sentences: 1000,
        }
    }
}

impl CompareConfig {
    /// The starting checkpoint `technique` trains.
    pub fn prepare(&self, base: &Checkpoint, technique: Technique) -> Result<Checkpoint> {
        match technique {
            Technique::FineTuning => Ok(base.clone()),
            Technique::AfAdapter => extend_checkpoint(base, self.ext_heads, self.ext_ffn, self.init, self.init_seed),
            Technique::Lora => lora_attach(base, self.lora_rank, self.lora_alpha, &self.lora_targets, self.init_seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TechniqueRow {
    pub technique: Technique,
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_ratio: f64,
    pub domain_loss_before: f64,
    pub domain_loss_after: f64,
    pub general_acc_before: f64,
    pub general_acc_after: f64,
    pub wall_clock_s: f64,
}

impl TechniqueRow {
    /// Relative drop in domain MLM loss.
    pub fn domain_loss_reduction(&self) -> f64 {
        (self.domain_loss_before - self.domain_loss_after) / self.domain_loss_before
    }

    /// General accuracy lost by training, as a fraction.
    pub fn general_acc_drop(&self) -> f64 {
        self.general_acc_before - self.general_acc_after
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonReport {
    pub rows: Vec<TechniqueRow>,
    /// Notes on runs whose domain-loss reductions differ by more than 10% relative.
    pub flags: Vec<String>,
    pub metrics: Vec<MetricsLog>,
    pub checkpoints: Vec<Checkpoint>,
}

pub const COMPARISON_HEADER: &str = "technique,total_params,trainable_params,trainable_ratio_pct,domain_loss_before,domain_loss_after,domain_loss_reduction_pct,general_acc_before_pct,general_acc_after_pct,general_acc_drop_pct";

impl ComparisonReport {
    pub fn row(&self, technique: Technique) -> Option<&TechniqueRow> {
        self.rows.iter().find(|r| r.technique == technique)
    }

    /// One row per technique. Wall-clock time is left out so that equal seeds give equal bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(COMPARISON_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.6},{:.6},{:.3},{:.3},{:.3},{:.3}",
                r.technique,
                r.total_params,
                r.trainable_params,
                100.0 * r.trainable_ratio,
                r.domain_loss_before,
                r.domain_loss_after,
                100.0 * r.domain_loss_reduction(),
                100.0 * r.general_acc_before,
                100.0 * r.general_acc_after,
                100.0 * r.general_acc_drop()
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:>22} {:>20} {:>10} {:>20} {:>8} {:>8}\n",
            "Technique", "Trainable", "Domain loss", "Reduction", "General acc", "Drop", "Time"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:>22} {:>20} {:>9.1}% {:>20} {:>7.2}pp {:>7.1}s",
                r.technique.as_str(),
                format!("{} ({:.2}%)", r.trainable_params, 100.0 * r.trainable_ratio),
                format!("{:.4} -> {:.4}", r.domain_loss_before, r.domain_loss_after),
                100.0 * r.domain_loss_reduction(),
                format!("{:.2}% -> {:.2}%", 100.0 * r.general_acc_before, 100.0 * r.general_acc_after),
                100.0 * r.general_acc_drop(),
                r.wall_clock_s
            );
        }
        for f in &self.flags {
            let _ = writeln!(out, "note: {f}");
        }
        out
    }
}

/// Trains every configured technique from `base` on the same domain corpus
/// with the same step budget, scoring domain loss and general accuracy
/// before and after.
pub fn compare_techniques(
    base: &Checkpoint,
    general_set: &EvalSet,
    domain_train: &[AnnotatedSequence],
    domain_set: &EvalSet,
    cfg: &CompareConfig,
    mut progress: impl FnMut(Technique, usize, f64),
) -> Result<ComparisonReport> {
    if cfg.techniques.is_empty() {
        return Err(Error::InvalidArgument("no techniques to compare".into()));
    }
    let base_acc = masked_accuracy(&base.weights, general_set)?;
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    for &technique in &cfg.techniques {
        let start = cfg.prepare(base, technique)?;
        let count = crate::surgery::ParamCount::from_config(start.config(), &start.make_mask(technique)?);
        let domain_before = eval_loss(&start.weights, domain_set)?;
        let timer = Instant::now();
        let (tuned, log) = crate::train::run_pretraining_with(&start, technique, domain_train, &cfg.train, |r| {
            progress(technique, r.step, r.raw_loss)
        })?;
        let wall = timer.elapsed().as_secs_f64();
        rows.push(TechniqueRow {
            technique,
            total_params: count.total,
            trainable_params: count.trainable,
            trainable_ratio: count.ratio,
            domain_loss_before: domain_before,
            domain_loss_after: eval_loss(&tuned.weights, domain_set)?,
            general_acc_before: base_acc,
            general_acc_after: masked_accuracy(&tuned.weights, general_set)?,
            wall_clock_s: wall,
        });
        metrics.push(log);
        checkpoints.push(tuned);
    }
    let mut flags = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            let (ra, rb) = (a.domain_loss_reduction(), b.domain_loss_reduction());
            let hi = ra.abs().max(rb.abs());
            if hi > 0.0 && (ra - rb).abs() / hi > 0.10 {
                flags.push(format!(
                    "domain-loss reductions of {} ({:.1}%) and {} ({:.1}%) differ by more than 10% relative",
                    a.technique,
                    100.0 * ra,
                    b.technique,
                    100.0 * rb
                ));
            }
        }
    }
    Ok(ComparisonReport {
        rows,
        flags,
        metrics,
        checkpoints,
    })
}

/// Holds out the last `domain_eval_sentences` domain sentences for the domain
/// loss, then runs [`compare_techniques`] on the rest.
pub fn run_compare(
    base: &Checkpoint,
    general_heldout: &[AnnotatedSequence],
    domain: &[AnnotatedSequence],
    cfg: &CompareConfig,
    progress: impl FnMut(Technique, usize, f64),
) -> Result<ComparisonReport> {
    if domain.len() <= cfg.domain_eval_sentences {
        return Err(Error::InvalidArgument(format!(
            "domain corpus has {} sentences; {} are reserved for evaluation",
            domain.len(),
            cfg.domain_eval_sentences
        )));
    }
    let split = domain.len() - cfg.domain_eval_sentences;
    let vocab = base.config().vocab_size;
    let general_set = EvalSet::new(general_heldout, &cfg.eval, vocab)?;
    let domain_set = EvalSet::new(&domain[split..], &cfg.eval, vocab)?;
    compare_techniques(base, &general_set, &domain[..split], &domain_set, cfg, progress)
}
