use afadapter::data::{AnnotatedSequence, Domain, Lexicon};
use afadapter::harness::{
    compare_techniques, emit_plots, eval_loss, forgetting_report, masked_accuracy, median, CompareConfig, EvalConfig,
    EvalSet,
};
use afadapter::model::{ModelConfig, IGNORE_INDEX};
use afadapter::surgery::{extend_checkpoint, Checkpoint, InitPolicy, Technique};
use afadapter::train::{smooth, train_step, AdamW, MetricsLog, StepRecord, TrainConfig};
use afadapter::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model_cfg(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(vocab);
    cfg.max_seq_len = 64;
    cfg
}

#[test]
fn memorized_sentence_scores_perfectly() {
    let lex = Lexicon::default();
    let vocab = lex.vocab().len();
    // A single word of two tokens: the 15% quota always selects it.
    let word = lex.inventory(Domain::General).find(|w| w.len() == 2).unwrap().to_vec();
    let sentence = AnnotatedSequence::from_words([word.as_slice()]);
    let set = EvalSet::new(&[sentence], &EvalConfig::default(), vocab).unwrap();
    assert_eq!(set.num_labels(), 2);

    let mut cfg = model_cfg(vocab);
    cfg.dropout_p = 0.0;
    let mut ckpt = Checkpoint::init_base(&cfg, 1).unwrap();
    let mask = ckpt.mask.clone();
    let train = TrainConfig {
        peak_lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&ckpt.weights, &mask, &train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        train_step(&mut ckpt.weights, &set.batches, &mut opt, &mask, 1e-2, None, &mut rng).unwrap();
    }
    assert_eq!(masked_accuracy(&ckpt.weights, &set).unwrap(), 1.0);
    assert!(eval_loss(&ckpt.weights, &set).unwrap() < 0.1);
}

#[test]
fn uniform_logits_score_chance() {
    let lex = Lexicon::default();
    let vocab = lex.vocab().len();
    let heldout = lex.gen_corpus(Domain::General, 3000, 9).unwrap();
    let set = EvalSet::new(&heldout, &EvalConfig::default(), vocab).unwrap();
    let mut ckpt = Checkpoint::init_base(&model_cfg(vocab), 2).unwrap();
    // Zero the final norm and output bias: every logit is exactly 0.
    for name in ["mlm.ln.gamma", "mlm.ln.beta", "mlm.output_bias"] {
        ckpt.weights.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let n = set.num_labels() as f64;
    let p = 1.0 / vocab as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    let acc = masked_accuracy(&ckpt.weights, &set).unwrap();
    assert!((acc - p).abs() <= 3.0 * sigma, "accuracy {acc}, chance {p}, sigma {sigma}, n {n}");
    assert!((eval_loss(&ckpt.weights, &set).unwrap() - (vocab as f64).ln()).abs() < 1e-5);
}

#[test]
fn evaluation_is_repeatable() {
    let lex = Lexicon::default();
    let vocab = lex.vocab().len();
    let heldout = lex.gen_corpus(Domain::General, 200, 9).unwrap();
    let set = EvalSet::new(&heldout, &EvalConfig::default(), vocab).unwrap();
    let again = EvalSet::new(&heldout, &EvalConfig::default(), vocab).unwrap();
    assert_eq!(set.digest(), again.digest());
    let ckpt = Checkpoint::init_base(&model_cfg(vocab), 2).unwrap();
    assert_eq!(
        masked_accuracy(&ckpt.weights, &set).unwrap(),
        masked_accuracy(&ckpt.weights, &again).unwrap()
    );
    let other = EvalSet::new(&heldout, &EvalConfig { seed: 8, ..EvalConfig::default() }, vocab).unwrap();
    assert_ne!(set.digest(), other.digest());
    for b in &set.batches {
        assert!(b.labels.iter().any(|&l| l != IGNORE_INDEX));
    }
    assert!(matches!(EvalSet::new(&[], &EvalConfig::default(), vocab), Err(Error::InvalidArgument(_))));
}

#[test]
fn forgetting_report_rows() {
    let lex = Lexicon::default();
    let vocab = lex.vocab().len();
    let heldout = lex.gen_corpus(Domain::General, 300, 9).unwrap();
    let set = EvalSet::new(&heldout, &EvalConfig::default(), vocab).unwrap();
    let base = Checkpoint::init_base(&model_cfg(vocab), 3).unwrap();
    let ext = extend_checkpoint(&base, 1, 16, InitPolicy::ZeroOutput, 4).unwrap();
    let report = forgetting_report(&base, &[("self".into(), base.clone()), ("ext".into(), ext)], &set).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.rows[0].model, "base");
    assert_eq!(report.rows[0].diff, 0.0);
    assert_eq!(report.rows[1].diff, 0.0);
    assert!(report.rows[2].diff.abs() <= 1.0 / report.labeled_positions as f64 + 1e-12);
    assert_eq!(report.input_digest, set.digest_hex());
    assert_eq!(report.labeled_positions, set.num_labels());
    let csv = report.to_csv();
    assert!(csv.starts_with("model,accuracy_pct,diff_pct\nbase,"));

    let other = Checkpoint::init_base(&model_cfg(vocab + 1), 3).unwrap();
    assert!(matches!(
        forgetting_report(&base, &[("other".into(), other)], &set),
        Err(Error::VocabMismatch(_))
    ));
    let mut deeper = model_cfg(vocab);
    deeper.n_layers = 3;
    let deeper = Checkpoint::init_base(&deeper, 3).unwrap();
    assert!(matches!(
        forgetting_report(&base, &[("deeper".into(), deeper)], &set),
        Err(Error::Config(_))
    ));
}

#[test]
fn small_comparison_is_consistent() {
    let lex = Lexicon::default();
    let vocab = lex.vocab().len();
    let general = lex.gen_corpus(Domain::General, 100, 1).unwrap();
    let domain = lex.gen_corpus(Domain::Specific, 200, 2).unwrap();
    let domain_eval = lex.gen_corpus(Domain::Specific, 60, 3).unwrap();
    let mut cfg = CompareConfig::default();
    cfg.train.total_steps = 6;
    cfg.train.warmup_steps = 1;
    cfg.train.micro_batch_size = 4;
    cfg.ext_ffn = 16;
    let gset = EvalSet::new(&general, &cfg.eval, vocab).unwrap();
    let dset = EvalSet::new(&domain_eval, &cfg.eval, vocab).unwrap();
    let base = Checkpoint::init_base(&model_cfg(vocab), 5).unwrap();
    let mut seen = Vec::new();
    let report = compare_techniques(&base, &gset, &domain, &dset, &cfg, |t, step, _| seen.push((t, step))).unwrap();
    assert_eq!(seen.len(), 18);
    assert_eq!(report.rows.len(), 3);

    let af = report.row(Technique::AfAdapter).unwrap();
    let ext = extend_checkpoint(&base, cfg.ext_heads, cfg.ext_ffn, cfg.init, cfg.init_seed).unwrap();
    let counts = ext.count_params();
    assert_eq!(af.trainable_params, counts.trainable);
    assert_eq!(af.total_params, counts.total);
    assert_eq!(af.trainable_ratio, counts.ratio);
    // Zero-output extension starts from the base function.
    let ft = report.row(Technique::FineTuning).unwrap();
    assert!((af.domain_loss_before - ft.domain_loss_before).abs() < 1e-5);
    assert!((af.general_acc_before - ft.general_acc_before).abs() < 1e-2);
    assert_eq!(ft.trainable_ratio, 1.0);

    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 4);
    let again = compare_techniques(&base, &gset, &domain, &dset, &cfg, |_, _, _| {}).unwrap();
    assert_eq!(again.to_csv(), csv);
    assert_eq!(again.metrics, report.metrics);
}

fn log_of(values: &[f64]) -> MetricsLog {
    let mut log = MetricsLog::new("fine_tuning", "x");
    for (i, &v) in values.iter().enumerate() {
        log.push(StepRecord {
            step: i,
            lr: 0.0,
            raw_loss: v,
        })
        .unwrap();
    }
    log
}

fn read_smoothed(path: &std::path::Path) -> Vec<(f64, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            (f[1], f[2])
        })
        .collect()
}

#[test]
fn plots_delegate_to_smoothing() {
    let dir = tempfile::tempdir().unwrap();
    let raw = [5.0, 4.0, 4.5, 3.0, 2.5, 2.75];
    let runs = vec![("af".to_string(), log_of(&raw)), ("flat".to_string(), log_of(&[2.0; 5]))];
    let files = emit_plots(&runs, 0.6, dir.path(), true).unwrap();
    assert_eq!(files.len(), 4);
    let af = read_smoothed(&dir.path().join("af.smoothed.csv"));
    let expected = smooth(&raw, 0.6).unwrap();
    for ((r, s), (&v, &e)) in af.iter().zip(raw.iter().zip(&expected)) {
        assert_eq!(*r, v);
        assert_eq!(*s, e);
    }
    for (r, s) in read_smoothed(&dir.path().join("flat.smoothed.csv")) {
        assert_eq!(r, s);
    }
    let svg = std::fs::read_to_string(dir.path().join("flat.svg")).unwrap();
    assert!(svg.starts_with("<svg") && !svg.contains("NaN"));
    assert!(emit_plots(&[], 0.6, dir.path(), false).is_err());
    assert!(emit_plots(&runs, 1.0, dir.path(), false).is_err());
}

#[test]
fn median_of_odd_and_even() {
    assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
    assert_eq!(median(vec![]), None);
}
