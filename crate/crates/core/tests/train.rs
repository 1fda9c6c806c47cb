use afadapter::data::{wwm_collate, AnnotatedSequence, CollatedBatch, Domain, Lexicon, CLS, SEP};
use afadapter::model::{loss_and_gradients, loss_and_gradients_for, schema, EncoderWeights, Mode, ModelConfig, ParamKind};
use afadapter::numerics::{Gradients, Tensor};
use afadapter::surgery::{extend_checkpoint, Checkpoint, InitPolicy, Technique, TrainabilityMask};
use afadapter::train::{lr_at, run_pretraining, smooth, train_step, AdamW, MetricsLog, TrainConfig};
use afadapter::Error;
use indexmap::IndexMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_weights() -> EncoderWeights<f64> {
    let mut cfg = ModelConfig::tiny(40);
    cfg.max_seq_len = 16;
    cfg.dropout_p = 0.0;
    Checkpoint::init_base(&cfg, 5).unwrap().weights.cast()
}

fn only(weights: &EncoderWeights<f64>, names: &[&str]) -> TrainabilityMask {
    TrainabilityMask::from_flags(
        schema(weights.config())
            .into_iter()
            .map(|s| {
                let on = names.contains(&s.name.as_str());
                (s.name, on)
            })
            .collect(),
    )
}

fn first_of(weights: &EncoderWeights<f64>, kind: ParamKind) -> String {
    schema(weights.config()).into_iter().find(|s| s.kind == kind).unwrap().name
}

fn grads_for(weights: &EncoderWeights<f64>, name: &str, f: impl Fn(usize) -> f64) -> Gradients<f64> {
    let shape = weights.tensor(name).unwrap().shape().to_vec();
    let mut map = IndexMap::new();
    map.insert(name.to_string(), Tensor::from_fn(&shape, f));
    Gradients::from_map(map)
}

/// Plain AdamW with bias correction, one parameter at a time.
struct ScalarAdamW {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdamW {
    fn step(&mut self, w: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let m_hat = self.m / (1.0 - b1.powi(self.t));
        let v_hat = self.v / (1.0 - b2.powi(self.t));
        w * (1.0 - lr * wd) - lr * m_hat / (v_hat.sqrt() + eps)
    }
}

#[test]
fn adamw_matches_closed_form() {
    let mut w = tiny_weights();
    let matrix = first_of(&w, ParamKind::Matrix);
    let bias = first_of(&w, ParamKind::Bias);
    let mask = only(&w, &[&matrix, &bias]);
    let cfg = TrainConfig {
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&w, &mask, &cfg).unwrap();
    let start_m = w.tensor(&matrix).unwrap().clone();
    let start_b = w.tensor(&bias).unwrap().clone();
    let mut oracle_m: Vec<(f64, ScalarAdamW)> =
        start_m.data().iter().map(|&x| (x, ScalarAdamW { m: 0.0, v: 0.0, t: 0 })).collect();
    let mut oracle_b: Vec<(f64, ScalarAdamW)> =
        start_b.data().iter().map(|&x| (x, ScalarAdamW { m: 0.0, v: 0.0, t: 0 })).collect();
    for step in 0..5 {
        let lr = 1e-3 * (step + 1) as f64;
        let gm = |i: usize| ((i * 7 + step * 3) % 11) as f64 * 0.1 - 0.5;
        let gb = |i: usize| ((i * 5 + step) % 7) as f64 * 0.2 - 0.6;
        let mut grads = grads_for(&w, &matrix, gm);
        grads.accumulate(&grads_for(&w, &bias, gb));
        opt.step(&mut w, &grads, lr).unwrap();
        for (i, (x, o)) in oracle_m.iter_mut().enumerate() {
            *x = o.step(*x, gm(i), lr, 0.1);
        }
        for (i, (x, o)) in oracle_b.iter_mut().enumerate() {
            *x = o.step(*x, gb(i), lr, 0.0);
        }
    }
    for (got, (want, _)) in w.tensor(&matrix).unwrap().data().iter().zip(&oracle_m) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    for (got, (want, _)) in w.tensor(&bias).unwrap().data().iter().zip(&oracle_b) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert_eq!(opt.step_count(), 5);
}

#[test]
fn scalar_first_step() {
    // After one step the bias-corrected ratio is sign(g) up to eps.
    let w0 = 0.3;
    let mut o = ScalarAdamW { m: 0.0, v: 0.0, t: 0 };
    let w1 = o.step(w0, 2.0, 0.01, 0.0);
    assert!((w1 - (0.3 - 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);

    let mut w = tiny_weights();
    let bias = first_of(&w, ParamKind::Bias);
    let mask = only(&w, &[&bias]);
    let mut opt = AdamW::new(&w, &mask, &TrainConfig::default()).unwrap();
    let before = w.tensor(&bias).unwrap().clone();
    let g = grads_for(&w, &bias, |_| 2.0);
    opt.step(&mut w, &g, 0.01).unwrap();
    for (a, b) in w.tensor(&bias).unwrap().data().iter().zip(before.data()) {
        assert!((a - (b - 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
    }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut w = tiny_weights();
    let names: Vec<String> = schema(w.config()).into_iter().map(|s| s.name).collect();
    let mask = TrainabilityMask::for_technique(w.config(), Technique::FineTuning).unwrap();
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&w, &mask, &cfg).unwrap();
    let before = w.clone();
    let mut map = IndexMap::new();
    for n in &names {
        map.insert(n.clone(), Tensor::zeros(w.tensor(n).unwrap().shape()));
    }
    opt.step(&mut w, &Gradients::from_map(map), 1e-3).unwrap();
    assert_eq!(w, before);
}

#[test]
fn frozen_tensors_ignore_incoming_gradients() {
    let mut w = tiny_weights();
    let matrix = first_of(&w, ParamKind::Matrix);
    let bias = first_of(&w, ParamKind::Bias);
    let mask = only(&w, &[&bias]);
    let mut opt = AdamW::new(&w, &mask, &TrainConfig::default()).unwrap();
    assert_eq!(opt.trainable().collect::<Vec<_>>(), vec![bias.as_str()]);
    let before = w.tensor(&matrix).unwrap().clone();
    let mut grads = grads_for(&w, &matrix, |_| 3.0);
    grads.accumulate(&grads_for(&w, &bias, |_| 1.0));
    opt.step(&mut w, &grads, 0.1).unwrap();
    let after = w.tensor(&matrix).unwrap();
    assert!(after.data().iter().zip(before.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn non_finite_gradient_aborts() {
    let mut w = tiny_weights();
    let bias = first_of(&w, ParamKind::Bias);
    let mask = only(&w, &[&bias]);
    let mut opt = AdamW::new(&w, &mask, &TrainConfig::default()).unwrap();
    let before = w.clone();
    let g = grads_for(&w, &bias, |i| if i == 1 { f64::NAN } else { 0.5 });
    let err = opt.step(&mut w, &g, 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert_eq!(w, before);
    assert_eq!(opt.step_count(), 0);
}

fn batch(seed: u64) -> CollatedBatch {
    let rows: Vec<AnnotatedSequence> = (0..3u32)
        .map(|r| {
            let words: Vec<Vec<u32>> = (0..5u32)
                .map(|w| (0..1 + (w + r) % 2).map(|k| 5 + (w * 7 + r * 3 + k + seed as u32) % 35).collect())
                .collect();
            let mut s = AnnotatedSequence::from_words(words.iter().map(Vec::as_slice));
            s.ids.insert(0, CLS);
            s.ids.push(SEP);
            s.spans.iter_mut().for_each(|sp| *sp = (sp.0 + 1, sp.1 + 1));
            s
        })
        .collect();
    wwm_collate(&rows, 0.3, seed, 40).unwrap()
}

#[test]
fn accumulation_of_identical_micro_batches_equals_single_step() {
    let b = batch(3);
    let mask = TrainabilityMask::for_technique(tiny_weights().config(), Technique::FineTuning).unwrap();
    let cfg = TrainConfig::default();
    let run = |group: &[CollatedBatch]| {
        let mut w = tiny_weights();
        let mut opt = AdamW::new(&w, &mask, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = train_step(&mut w, group, &mut opt, &mask, 1e-3, None, &mut rng).unwrap();
        (w, loss)
    };
    let (one, l1) = run(std::slice::from_ref(&b));
    let (two, l2) = run(&[b.clone(), b.clone()]);
    assert!((l1 - l2).abs() <= 1e-12);
    for ((name, a), (_, c)) in one.iter().zip(two.iter()) {
        let d = a.max_abs_diff(c).unwrap();
        assert!(d <= 1e-10, "{name}: {d}");
    }
}

#[test]
fn masked_gradients_match_full_gradients() {
    let w = tiny_weights();
    let b = batch(4);
    let input = b.input().unwrap();
    let (l_full, full) = loss_and_gradients(&w, &input, &b.labels, Mode::Eval).unwrap();
    let keep = [first_of(&w, ParamKind::Bias), "embeddings.token".to_string()];
    let (l_part, part) =
        loss_and_gradients_for(&w, &input, &b.labels, Mode::Eval, |n| keep.iter().any(|k| k == n)).unwrap();
    assert_eq!(l_full, l_part);
    assert_eq!(part.len(), keep.len());
    for k in &keep {
        assert_eq!(part.get(k).unwrap(), full.get(k).unwrap());
    }
}

fn overfit_setup() -> (Checkpoint, Vec<AnnotatedSequence>) {
    let lex = Lexicon::default();
    let corpus = lex.gen_corpus(Domain::General, 50, 21).unwrap();
    let mut cfg = ModelConfig::tiny(lex.vocab().len());
    cfg.max_seq_len = 64;
    (Checkpoint::init_base(&cfg, 2).unwrap(), corpus)
}

fn overfit_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        warmup_steps: 10,
        micro_batch_size: 8,
        grad_accum_steps: 1,
        max_seq_len: 64,
        peak_lr: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn loss_halves_when_overfitting_a_small_corpus() {
    let (ckpt, corpus) = overfit_setup();
    let (_, log) = run_pretraining(&ckpt, Technique::FineTuning, &corpus, &overfit_cfg(200)).unwrap();
    let losses = log.losses();
    assert_eq!(losses.len(), 200);
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.5 * first, "initial {first}, final {last}");
}

#[test]
fn runs_are_deterministic_and_respect_the_mask() {
    let (base, corpus) = overfit_setup();
    let ext = extend_checkpoint(&base, 1, 16, InitPolicy::ZeroOutput, 3).unwrap();
    let cfg = overfit_cfg(12);
    let (a, la) = run_pretraining(&ext, Technique::AfAdapter, &corpus, &cfg).unwrap();
    let (b, lb) = run_pretraining(&ext, Technique::AfAdapter, &corpus, &cfg).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let before = ext.tensor_digests();
    let after = a.tensor_digests();
    for name in ext.mask.frozen_names() {
        assert_eq!(before[name], after[name], "{name}");
    }
    assert!(ext.mask.trainable().any(|n| before[n] != after[n]));
    assert!(a.provenance.starts_with("af_adapter("));
    assert_eq!(la.meta.technique, "af_adapter");
    assert_eq!(la.meta.config_hash, cfg.hash());
}

#[test]
fn empty_extension_has_nothing_to_train() {
    let (base, corpus) = overfit_setup();
    let ext = extend_checkpoint(&base, 0, 0, InitPolicy::ZeroOutput, 3).unwrap();
    let err = run_pretraining(&ext, Technique::AfAdapter, &corpus, &overfit_cfg(12)).unwrap_err();
    assert!(matches!(err, Error::NothingToTrain), "{err:?}");
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig {
        warmup_steps: 1000,
        total_steps: 3000,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
    assert_eq!(lr_at(1000, &cfg).unwrap(), 4e-4);
    assert!((lr_at(2000, &cfg).unwrap() - 2e-4).abs() < 1e-15);
    assert_eq!(lr_at(3000, &cfg).unwrap(), 0.0);
    assert!(lr_at(3001, &cfg).is_err());
    assert_eq!(cfg.effective_batch(), 512);
}

#[test]
fn smoothing_examples() {
    assert_eq!(smooth(&[0.0, 1.0], 0.6).unwrap(), vec![0.0, 0.4]);
    assert_eq!(smooth(&[3.0, 1.0, 2.0], 0.0).unwrap(), vec![3.0, 1.0, 2.0]);
    assert!(smooth(&[], 0.6).is_err());
    assert!(smooth(&[1.0], 1.0).is_err());
    assert!(smooth(&[1.0], -0.1).is_err());
}

#[test]
fn metrics_round_trip() {
    let (ckpt, corpus) = overfit_setup();
    let (_, log) = run_pretraining(&ckpt, Technique::FineTuning, &corpus, &overfit_cfg(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    log.save(&p).unwrap();
    assert!(std::fs::read_to_string(&p).unwrap().starts_with("step,lr,raw_loss\n"));
    assert_eq!(MetricsLog::load(&p).unwrap(), log);
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_continuous(warmup in 0usize..200, extra in 0usize..200, peak in 1e-5f64..1e-2) {
        let cfg = TrainConfig { warmup_steps: warmup, total_steps: warmup + extra, peak_lr: peak, ..TrainConfig::default() };
        for s in 0..=cfg.total_steps {
            let lr = lr_at(s, &cfg).unwrap();
            prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
        }
        if warmup > 0 {
            prop_assert!((lr_at(warmup, &cfg).unwrap() - peak).abs() <= 1e-15);
        }
    }

    #[test]
    fn smoothing_fixes_constants(v in -10.0f64..10.0, n in 1usize..30, alpha in 0.0f64..0.99) {
        let s = smooth(&vec![v; n], alpha).unwrap();
        prop_assert!(s.iter().all(|x| (x - v).abs() <= 1e-12 * v.abs().max(1.0)));
    }

    #[test]
    fn metrics_steps_strictly_increase(steps in prop::collection::vec(0usize..50, 1..20)) {
        let mut log = MetricsLog::new("fine_tuning", "h");
        let mut last: Option<usize> = None;
        for s in steps {
            let ok = log.push(afadapter::train::StepRecord { step: s, lr: 0.0, raw_loss: 1.0 }).is_ok();
            prop_assert_eq!(ok, last.is_none_or(|l| s > l));
            if ok { last = Some(s); }
        }
    }
}
