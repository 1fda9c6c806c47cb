use std::collections::{HashMap, HashSet};

use afadapter::data::{
    group_sentences, wwm_collate, AnnotatedSequence, Corruption, Domain, Lexicon, LexiconConfig, CLS, MASK, NUM_SPECIAL,
    SEP,
};
use afadapter::model::IGNORE_INDEX;
use proptest::prelude::*;

fn unigram(corpus: &[AnnotatedSequence]) -> HashMap<u32, f64> {
    let mut counts = HashMap::new();
    let mut n = 0.0;
    for s in corpus {
        for &id in &s.ids {
            *counts.entry(id).or_insert(0.0) += 1.0;
            n += 1.0;
        }
    }
    counts.values_mut().for_each(|c| *c /= n);
    counts
}

#[test]
fn domains_differ_in_unigram_distribution() {
    let lex = Lexicon::default();
    let g = unigram(&lex.gen_corpus(Domain::General, 10_000, 1).unwrap());
    let d = unigram(&lex.gen_corpus(Domain::Specific, 10_000, 2).unwrap());
    let keys: HashSet<u32> = g.keys().chain(d.keys()).copied().collect();
    let tv: f64 = 0.5
        * keys
            .iter()
            .map(|k| (g.get(k).unwrap_or(&0.0) - d.get(k).unwrap_or(&0.0)).abs())
            .sum::<f64>();
    assert!(tv > 0.2, "total variation {tv}");
}

#[test]
fn zero_overlap_shares_only_core_words() {
    let cfg = LexiconConfig {
        overlap: 0.0,
        ..LexiconConfig::default()
    };
    let core_end = NUM_SPECIAL + cfg.core_words as u32;
    let lex = Lexicon::new(cfg).unwrap();
    let tokens = |d| -> HashSet<u32> {
        lex.gen_corpus(d, 3000, 5)
            .unwrap()
            .iter()
            .flat_map(|s| s.ids.clone())
            .collect()
    };
    let (g, d) = (tokens(Domain::General), tokens(Domain::Specific));
    for id in g.intersection(&d) {
        assert!(*id < core_end, "token {id} shared outside the core words");
    }
    let inv: Vec<Vec<u32>> = lex.inventory(Domain::Specific).map(<[u32]>::to_vec).collect();
    assert!(lex.inventory(Domain::General).all(|w| w[0] < core_end || !inv.contains(&w.to_vec())));
}

#[test]
fn corpus_never_contains_specials() {
    let lex = Lexicon::default();
    for d in [Domain::General, Domain::Specific] {
        for s in lex.gen_corpus(d, 500, 3).unwrap() {
            assert!(s.ids.iter().all(|&id| id >= NUM_SPECIAL && id != MASK));
            assert!(s.spans.iter().all(|&(a, b)| (1..=3).contains(&(b - a))));
            s.validate().unwrap();
        }
    }
}

/// Labeled fraction and 80/10/10 split at the default 512-token packing.
#[test]
fn wwm_frequencies() {
    let lex = Lexicon::default();
    let vocab = lex.vocab().len();
    let packed = group_sentences(&lex.gen_corpus(Domain::General, 12_000, 4).unwrap(), 512).unwrap();
    let (mut positions, mut labeled) = (0usize, 0usize);
    let mut classes = [0usize; 3];
    for (i, chunk) in packed.chunks(8).enumerate() {
        let b = wwm_collate(chunk, 0.15, 1000 + i as u64, vocab).unwrap();
        positions += chunk.iter().map(|s| s.spans.iter().map(|&(a, e)| e - a).sum::<usize>()).sum::<usize>();
        labeled += b.num_labels();
        for c in &b.corruption {
            classes[*c as usize] += 1;
        }
    }
    assert!(positions >= 100_000, "{positions}");
    let frac = labeled as f64 / positions as f64;
    assert!((frac - 0.15).abs() <= 0.01, "labeled fraction {frac}");
    let share = |i: usize| classes[i] as f64 / labeled as f64;
    assert!((share(Corruption::Masked as usize) - 0.8).abs() <= 0.02);
    assert!((share(Corruption::Unchanged as usize) - 0.1).abs() <= 0.02);
    assert!((share(Corruption::Random as usize) - 0.1).abs() <= 0.02);
}

fn arb_sequence() -> impl Strategy<Value = AnnotatedSequence> {
    prop::collection::vec(prop::collection::vec(NUM_SPECIAL..60u32, 1..=3), 1..20).prop_map(|words| {
        let mut s = AnnotatedSequence::from_words(words.iter().map(Vec::as_slice));
        s.ids.insert(0, CLS);
        s.ids.push(SEP);
        s.spans.iter_mut().for_each(|sp| *sp = (sp.0 + 1, sp.1 + 1));
        s
    })
}

proptest! {
    #[test]
    fn collation_invariants(seqs in prop::collection::vec(arb_sequence(), 1..6), rate in 0.0f64..0.9, seed: u64) {
        let b = wwm_collate(&seqs, rate, seed, 60).unwrap();
        prop_assert_eq!(&b, &wwm_collate(&seqs, rate, seed, 60).unwrap());
        for (row, s) in seqs.iter().enumerate() {
            let off = row * b.seq;
            // Atomicity: a span is labeled entirely or not at all.
            for &(a, e) in &s.spans {
                let labeled: Vec<bool> = (a..e).map(|p| b.labels[off + p] != IGNORE_INDEX).collect();
                prop_assert!(labeled.iter().all(|&l| l == labeled[0]));
                for p in a..e {
                    if labeled[0] {
                        prop_assert_eq!(b.labels[off + p], s.ids[p] as i64);
                    } else {
                        prop_assert_eq!(b.input_ids[off + p], s.ids[p]);
                    }
                }
            }
            for p in 0..b.seq {
                let id = s.ids.get(p).copied();
                if id.is_none_or(|id| id < NUM_SPECIAL) {
                    prop_assert_eq!(b.labels[off + p], IGNORE_INDEX);
                    prop_assert_eq!(Some(b.input_ids[off + p]), id.or(Some(0)));
                } else if b.labels[off + p] != IGNORE_INDEX {
                    let x = b.input_ids[off + p];
                    prop_assert!(x == MASK || x >= NUM_SPECIAL);
                }
            }
            let maskable: usize = s.spans.iter().map(|&(a, e)| e - a).sum();
            let got = (0..s.len()).filter(|&p| b.labels[off + p] != IGNORE_INDEX).count();
            let quota = (rate * maskable as f64).ceil() as usize;
            prop_assert!(got >= quota.min(maskable));
            prop_assert!(got < quota + 3);
        }
    }

    #[test]
    fn grouping_preserves_order_and_spans(
        sents in prop::collection::vec(arb_sequence(), 1..12),
        max_len in 60usize..120,
    ) {
        let sents: Vec<AnnotatedSequence> = sents
            .into_iter()
            .map(|mut s| {
                s.ids.retain(|&t| t >= NUM_SPECIAL);
                s.spans.iter_mut().for_each(|sp| *sp = (sp.0 - 1, sp.1 - 1));
                s
            })
            .collect();
        let packed = group_sentences(&sents, max_len).unwrap();
        let flat: Vec<u32> = packed.iter().flat_map(|s| s.ids.iter().copied().filter(|&t| t >= NUM_SPECIAL)).collect();
        let orig: Vec<u32> = sents.iter().flat_map(|s| s.ids.clone()).collect();
        prop_assert_eq!(flat, orig);
        for p in &packed {
            prop_assert!(p.len() <= max_len);
            prop_assert_eq!(p.ids[0], CLS);
            prop_assert_eq!(*p.ids.last().unwrap(), SEP);
            p.validate().unwrap();
        }
        let n_spans: usize = packed.iter().map(|p| p.spans.len()).sum();
        prop_assert_eq!(n_spans, sents.iter().map(|s| s.spans.len()).sum::<usize>());
    }
}
