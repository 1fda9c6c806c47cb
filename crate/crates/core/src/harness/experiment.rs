use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Domain, Lexicon, LexiconConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::surgery::{Checkpoint, Technique};
use crate::train::{MetricsLog, TrainConfig};

use super::eval::{masked_accuracy, EvalSet};
use super::report::{compare_techniques, ComparisonReport, CompareConfig};

/// End-to-end forgetting experiment: synthesize both corpora, pretrain a base
/// model on the general one, then compare techniques on the specific domain
/// once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lexicon: LexiconConfig,
    /// `vocab_size` is taken from the lexicon.
    pub model: ModelConfig,
    pub general_sentences: usize,
    pub domain_sentences: usize,
    pub general_heldout_sentences: usize,
    pub corpus_seed: u64,
    pub base_init_seed: u64,
    pub base_train: TrainConfig,
    pub compare: CompareConfig,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let lexicon = LexiconConfig::default();
        ExperimentConfig {
            model: ModelConfig::tiny(0),
            lexicon,
            general_sentences: 20_000,
            domain_sentences: 20_000,
            general_heldout_sentences: 2_000,
            corpus_seed: 11,
            base_init_seed: 0,
            base_train: TrainConfig {
                total_steps: 3000,
                warmup_steps: 300,
                micro_batch_size: 16,
                grad_accum_steps: 1,
                max_seq_len: 64,
                peak_lr: 1e-3,
                ..TrainConfig::default()
            },
            compare: CompareConfig::default(),
            seeds: vec![1, 2, 3],
        }
    }
}

/// Per-seed comparison reports plus medians across seeds.
pub struct ExperimentResult {
    pub base: Checkpoint,
    pub base_metrics: MetricsLog,
    pub base_general_acc: f64,
    pub runs: Vec<(u64, ComparisonReport)>,
}

impl ExperimentResult {
    fn per_technique(&self, technique: Technique, f: impl Fn(&super::report::TechniqueRow) -> f64) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|(_, r)| r.row(technique).map(&f))
            .collect()
    }

    pub fn median_drop(&self, technique: Technique) -> Option<f64> {
        median(self.per_technique(technique, |r| r.general_acc_drop()))
    }

    pub fn median_reduction(&self, technique: Technique) -> Option<f64> {
        median(self.per_technique(technique, |r| r.domain_loss_reduction()))
    }

    pub fn min_reduction(&self, technique: Technique) -> Option<f64> {
        self.per_technique(technique, |r| r.domain_loss_reduction())
            .into_iter()
            .reduce(f64::min)
    }

    /// Every metrics CSV keyed by file name: `base.csv` and `seed<S>_<technique>.csv`.
    pub fn metrics_files(&self) -> Vec<(String, String)> {
        let mut out = vec![("base.csv".to_string(), self.base_metrics.to_csv())];
        for (seed, report) in &self.runs {
            for log in &report.metrics {
                out.push((format!("seed{seed}_{}.csv", log.meta.technique), log.to_csv()));
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = format!("base general accuracy: {:.2}%\n", 100.0 * self.base_general_acc);
        for (seed, r) in &self.runs {
            let _ = writeln!(out, "seed {seed}:");
            out.push_str(&r.to_table());
        }
        let _ = writeln!(out, "medians over {} seeds:", self.runs.len());
        for t in Technique::ALL {
            if let (Some(d), Some(r)) = (self.median_drop(t), self.median_reduction(t)) {
                let _ = writeln!(
                    out,
                    "  {:<12} general-accuracy drop {:>6.2}pp, domain-loss reduction {:>5.1}%",
                    t.as_str(),
                    100.0 * d,
                    100.0 * r
                );
            }
        }
        out
    }

    /// Writes every metrics CSV, each comparison CSV and the summary into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (name, csv) in self.metrics_files() {
            fs::write(dir.join(name), csv)?;
        }
        for (seed, r) in &self.runs {
            fs::write(dir.join(format!("seed{seed}_comparison.csv")), r.to_csv())?;
        }
        fs::write(dir.join("summary.txt"), self.summary())?;
        Ok(())
    }
}

pub fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// What the experiment is doing, for progress reporting.
#[derive(Clone, Copy, Debug)]
pub enum Stage {
    Base { step: usize, loss: f64 },
    Continual { seed: u64, technique: Technique, step: usize, loss: f64 },
}

pub fn run_experiment(cfg: &ExperimentConfig, mut progress: impl FnMut(Stage)) -> Result<ExperimentResult> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("experiment needs at least one seed".into()));
    }
    let lex = Lexicon::new(cfg.lexicon.clone())?;
    let vocab = lex.vocab().len();
    let mut model = cfg.model.clone();
    model.vocab_size = vocab;
    model.validate()?;

    // Disjoint sampling seeds keep held-out text apart from training text.
    let s = cfg.corpus_seed.wrapping_mul(4);
    let general = lex.gen_corpus(Domain::General, cfg.general_sentences, s)?;
    let general_heldout = lex.gen_corpus(Domain::General, cfg.general_heldout_sentences, s + 1)?;
    let domain = lex.gen_corpus(Domain::Specific, cfg.domain_sentences, s + 2)?;
    let domain_heldout = lex.gen_corpus(Domain::Specific, cfg.compare.domain_eval_sentences.max(1), s + 3)?;

    let init = Checkpoint::init_base(&model, cfg.base_init_seed)?;
    let (base, base_metrics) = crate::train::run_pretraining_with(&init, Technique::FineTuning, &general, &cfg.base_train, |r| {
        progress(Stage::Base {
            step: r.step,
            loss: r.raw_loss,
        })
    })?;
    let base = Checkpoint {
        provenance: format!("base(seed={}) <- general corpus", cfg.base_init_seed),
        ..base
    };

    let general_set = EvalSet::new(&general_heldout, &cfg.compare.eval, vocab)?;
    let domain_set = EvalSet::new(&domain_heldout, &cfg.compare.eval, vocab)?;
    let base_general_acc = masked_accuracy(&base.weights, &general_set)?;

    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let mut c = cfg.compare.clone();
        c.train.seed = seed;
        c.init_seed = seed;
        let report = compare_techniques(&base, &general_set, &domain, &domain_set, &c, |technique, step, loss| {
            progress(Stage::Continual {
                seed,
                technique,
                step,
                loss,
            })
        })?;
        runs.push((seed, report));
    }
    Ok(ExperimentResult {
        base,
        base_metrics,
        base_general_acc,
        runs,
    })
}
