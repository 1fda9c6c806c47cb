use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vocab::{Vocab, CLS, JOINER, SEP};

/// Token ids with word boundaries. `spans` are half-open `(start, end)`
/// ranges that partition the non-special positions, in order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AnnotatedSequence {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

impl AnnotatedSequence {
    /// A sentence built from whole words, no special tokens.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut ids = Vec::new();
        let mut spans = Vec::new();
        for w in words {
            let start = ids.len();
            ids.extend_from_slice(w);
            spans.push((start, ids.len()));
        }
        AnnotatedSequence { ids, spans }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the span invariants: ordered, non-empty, non-overlapping, and
    /// covering exactly the non-special positions.
    pub fn validate(&self) -> Result<()> {
        let mut covered = vec![false; self.ids.len()];
        let mut prev_end = 0;
        for &(s, e) in &self.spans {
            if s >= e || e > self.ids.len() || s < prev_end {
                return Err(Error::Format(format!("bad word span ({s}, {e})")));
            }
            covered[s..e].iter_mut().for_each(|c| *c = true);
            prev_end = e;
        }
        for (pos, (&id, &c)) in self.ids.iter().zip(&covered).enumerate() {
            if Vocab::is_special(id) == c {
                return Err(Error::Format(format!("position {pos} (id {id}) breaks span coverage")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    General,
    Specific,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::General => "general",
            Domain::Specific => "specific",
        })
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Domain::General),
            "specific" => Ok(Domain::Specific),
            other => Err(Error::InvalidArgument(format!(
                "unknown domain `{other}` (expected general or specific)"
            ))),
        }
    }
}

pub const DEFAULT_LEXICON_SEED: u64 = 0x5eed_1e81_c0de;

/// Shape of the synthetic two-domain language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LexiconConfig {
    /// Single-token function words shared by both domains.
    pub core_words: usize,
    /// Content words in each domain's inventory.
    pub content_words: usize,
    /// Size of each domain's private token pool.
    pub pool_tokens: usize,
    /// Fraction of the specific domain's content words borrowed from the general inventory.
    pub overlap: f64,
    /// Distinct successors per word in a transition table.
    pub successors: usize,
    pub min_words: usize,
    pub max_sentence_tokens: usize,
    /// Chance of ending a sentence after each word once `min_words` is reached.
    pub stop_prob: f64,
    pub seed: u64,
}

impl Default for LexiconConfig {
    fn default() -> Self {
        LexiconConfig {
            core_words: 24,
            content_words: 96,
            pool_tokens: 80,
            overlap: 0.5,
            successors: 5,
            min_words: 4,
            max_sentence_tokens: 24,
            stop_prob: 0.2,
            seed: DEFAULT_LEXICON_SEED,
        }
    }
}

struct Chain {
    /// Word indices into `Lexicon::words`.
    inventory: Vec<usize>,
    start: Table,
    /// Indexed by word index; `None` for words outside the inventory.
    next: Vec<Option<Table>>,
}

struct Table {
    words: Vec<usize>,
    cumulative: Vec<f64>,
}

impl Table {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.words[i.min(self.words.len() - 1)]
    }

    fn random(inventory: &[usize], k: usize, rng: &mut impl Rng) -> Self {
        let words: Vec<usize> = inventory.choose_multiple(rng, k.min(inventory.len())).copied().collect();
        let mut acc = 0.0;
        let cumulative = words
            .iter()
            .map(|_| {
                // Squared exponential weights give a skewed, learnable distribution.
                let w: f64 = Exp1.sample(rng);
                acc += w * w + 1e-3;
                acc
            })
            .collect();
        Table { words, cumulative }
    }
}

/// Vocabulary, word inventories and the per-domain Markov chains. Everything
/// here is a function of the config alone, so independently generated corpora
/// share token ids.
pub struct Lexicon {
    config: LexiconConfig,
    vocab: Vocab,
    words: Vec<Vec<u32>>,
    general: Chain,
    specific: Chain,
}

impl Lexicon {
    pub fn new(config: LexiconConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&config.overlap) {
            return Err(Error::InvalidArgument(format!("overlap {} outside [0, 1]", config.overlap)));
        }
        if config.content_words == 0 || config.pool_tokens == 0 || config.successors == 0 {
            return Err(Error::InvalidArgument("lexicon sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.stop_prob) || config.stop_prob == 0.0 {
            return Err(Error::InvalidArgument("stop_prob must lie in (0, 1)".into()));
        }
        if config.max_sentence_tokens < 3 {
            return Err(Error::InvalidArgument("max_sentence_tokens must be at least 3".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let names = (0..config.core_words)
            .map(|n| format!("f{n}"))
            .chain((0..config.pool_tokens).map(|n| format!("g{n}")))
            .chain((0..config.pool_tokens).map(|n| format!("d{n}")));
        let vocab = Vocab::with_tokens(names)?;
        let base = super::vocab::NUM_SPECIAL;
        let core_ids: Vec<u32> = (0..config.core_words as u32).map(|n| base + n).collect();
        let g_pool: Vec<u32> = (0..config.pool_tokens as u32).map(|n| base + config.core_words as u32 + n).collect();
        let d_pool: Vec<u32> = g_pool.iter().map(|&id| id + config.pool_tokens as u32).collect();

        let mut words: Vec<Vec<u32>> = core_ids.iter().map(|&id| vec![id]).collect();
        let core_range: Vec<usize> = (0..words.len()).collect();
        let general_content = make_words(&mut words, &g_pool, config.content_words, &mut rng)?;
        let shared = (config.overlap * config.content_words as f64).round() as usize;
        let mut borrowed: Vec<usize> = general_content.choose_multiple(&mut rng, shared).copied().collect();
        borrowed.sort_unstable();
        let own = make_words(&mut words, &d_pool, config.content_words - shared, &mut rng)?;

        let general_inv: Vec<usize> = core_range.iter().chain(&general_content).copied().collect();
        let specific_inv: Vec<usize> = core_range.iter().chain(&borrowed).chain(&own).copied().collect();
        let n_words = words.len();
        let general = build_chain(general_inv, n_words, &config, &mut rng);
        let specific = build_chain(specific_inv, n_words, &config, &mut rng);
        Ok(Lexicon {
            config,
            vocab,
            words,
            general,
            specific,
        })
    }

    pub fn config(&self) -> &LexiconConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Token ids of every word the domain can emit.
    pub fn inventory(&self, domain: Domain) -> impl Iterator<Item = &[u32]> {
        self.chain(domain).inventory.iter().map(|&w| self.words[w].as_slice())
    }

    fn chain(&self, domain: Domain) -> &Chain {
        match domain {
            Domain::General => &self.general,
            Domain::Specific => &self.specific,
        }
    }

    /// `n_sentences` sentences sampled from the domain's chain. `seed` only
    /// drives sampling; the chain itself is fixed by the lexicon.
    pub fn gen_corpus(&self, domain: Domain, n_sentences: usize, seed: u64) -> Result<Vec<AnnotatedSequence>> {
        if n_sentences == 0 {
            return Err(Error::InvalidArgument("n_sentences must be at least 1".into()));
        }
        let chain = self.chain(domain);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = &self.config;
        let mut out = Vec::with_capacity(n_sentences);
        for _ in 0..n_sentences {
            let mut sentence: Vec<usize> = Vec::new();
            let mut tokens = 0;
            let mut word = chain.start.sample(&mut rng);
            loop {
                let len = self.words[word].len();
                if tokens + len > cfg.max_sentence_tokens {
                    break;
                }
                tokens += len;
                sentence.push(word);
                if sentence.len() >= cfg.min_words && rng.random::<f64>() < cfg.stop_prob {
                    break;
                }
                word = chain.next[word].as_ref().expect("inventory word").sample(&mut rng);
            }
            out.push(AnnotatedSequence::from_words(sentence.iter().map(|&w| self.words[w].as_slice())));
        }
        Ok(out)
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::new(LexiconConfig::default()).expect("default lexicon config is valid")
    }
}

fn make_words(words: &mut Vec<Vec<u32>>, pool: &[u32], n: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let mut seen: HashSet<Vec<u32>> = words.iter().cloned().collect();
    let mut made = Vec::with_capacity(n);
    let mut attempts = 0;
    while made.len() < n {
        attempts += 1;
        if attempts > 1000 * (n + 1) {
            return Err(Error::InvalidArgument(format!(
                "cannot form {n} distinct words from a pool of {} tokens",
                pool.len()
            )));
        }
        let len = match rng.random::<f64>() {
            u if u < 0.4 => 1,
            u if u < 0.8 => 2,
            _ => 3,
        };
        let w: Vec<u32> = (0..len).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        if seen.insert(w.clone()) {
            made.push(words.len());
            words.push(w);
        }
    }
    Ok(made)
}

fn build_chain(inventory: Vec<usize>, n_words: usize, cfg: &LexiconConfig, rng: &mut impl Rng) -> Chain {
    let start = Table::random(&inventory, cfg.successors * 2, rng);
    let mut next: Vec<Option<Table>> = (0..n_words).map(|_| None).collect();
    for &w in &inventory {
        next[w] = Some(Table::random(&inventory, cfg.successors, rng));
    }
    Chain { inventory, start, next }
}

/// Packs sentences greedily, in order, into `[CLS] s1 [SEP] s2 [SEP] ...`
/// sequences of at most `max_len` tokens, shifting word spans accordingly.
pub fn group_sentences(sentences: &[AnnotatedSequence], max_len: usize) -> Result<Vec<AnnotatedSequence>> {
    let budget = max_len.saturating_sub(2);
    let mut out = Vec::new();
    let mut cur = AnnotatedSequence {
        ids: vec![CLS],
        spans: Vec::new(),
    };
    for s in sentences {
        if s.is_empty() {
            continue;
        }
        if s.len() > budget {
            return Err(Error::SequenceTooLong { len: s.len(), max: budget });
        }
        if cur.ids.len() + s.len() + 1 > max_len {
            out.push(std::mem::replace(
                &mut cur,
                AnnotatedSequence {
                    ids: vec![CLS],
                    spans: Vec::new(),
                },
            ));
        }
        let off = cur.ids.len();
        cur.ids.extend_from_slice(&s.ids);
        cur.spans.extend(s.spans.iter().map(|&(a, b)| (a + off, b + off)));
        cur.ids.push(SEP);
    }
    if cur.ids.len() > 1 {
        out.push(cur);
    }
    Ok(out)
}

/// Path of the vocabulary file that accompanies a corpus file.
pub fn vocab_path(corpus: &Path) -> PathBuf {
    let mut p = corpus.as_os_str().to_owned();
    p.push(".vocab");
    PathBuf::from(p)
}

/// Writes one sentence per line, tokens separated by spaces, every token that
/// continues a word prefixed with `##`. The vocabulary goes to `<path>.vocab`.
pub fn write_corpus(path: impl AsRef<Path>, vocab: &Vocab, sentences: &[AnnotatedSequence]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in sentences {
        let mut line = String::new();
        for &(a, b) in &s.spans {
            for pos in a..b {
                if !line.is_empty() {
                    line.push(' ');
                }
                if pos > a {
                    line.push_str(JOINER);
                }
                let id = s.ids[pos];
                line.push_str(vocab.token(id).ok_or(Error::TokenOutOfRange {
                    id,
                    vocab_size: vocab.len(),
                })?);
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    vocab.save(vocab_path(path))?;
    Ok(())
}

/// Reads a corpus file and its companion vocabulary.
pub fn read_corpus(path: impl AsRef<Path>) -> Result<(Vocab, Vec<AnnotatedSequence>)> {
    let path = path.as_ref();
    let vp = vocab_path(path);
    let vocab = Vocab::load(&vp).map_err(|e| match e {
        Error::Io(io) => Error::Format(format!("cannot read vocabulary {}: {io}", vp.display())),
        other => other,
    })?;
    let reader = BufReader::new(fs::File::open(path)?);
    let mut sentences = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut ids = Vec::new();
        let mut spans: Vec<(usize, usize)> = Vec::new();
        for tok in line.split_whitespace() {
            let (cont, name) = match tok.strip_prefix(JOINER) {
                Some(rest) => (true, rest),
                None => (false, tok),
            };
            let id = vocab
                .id(name)
                .filter(|&id| !Vocab::is_special(id))
                .ok_or_else(|| Error::Format(format!("line {}: unknown token {name:?}", lineno + 1)))?;
            let pos = ids.len();
            ids.push(id);
            match spans.last_mut() {
                Some(last) if cont => last.1 = pos + 1,
                None if cont => {
                    return Err(Error::Format(format!("line {}: sentence starts with a continuation", lineno + 1)));
                }
                _ => spans.push((pos, pos + 1)),
            }
        }
        sentences.push(AnnotatedSequence { ids, spans });
    }
    Ok((vocab, sentences))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_corpus() {
        let lex = Lexicon::default();
        let a = lex.gen_corpus(Domain::General, 50, 9).unwrap();
        let b = lex.gen_corpus(Domain::General, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, lex.gen_corpus(Domain::General, 50, 10).unwrap());
        for s in &a {
            s.validate().unwrap();
            assert!(s.len() <= lex.config().max_sentence_tokens);
        }
    }

    #[test]
    fn zero_sentences_rejected() {
        assert!(Lexicon::default().gen_corpus(Domain::Specific, 0, 1).is_err());
    }

    #[test]
    fn grouping_examples() {
        let s1 = AnnotatedSequence::from_words([&[10u32, 11][..], &[12]]);
        let s2 = AnnotatedSequence::from_words([&[13u32][..], &[14, 15, 16]]);
        let g = group_sentences(std::slice::from_ref(&s1), 16).unwrap();
        assert_eq!(g[0].ids, vec![CLS, 10, 11, 12, SEP]);

        let g = group_sentences(&[s1.clone(), s2.clone()], 16).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].ids.iter().filter(|&&t| t == SEP).count(), 2);
        for p in 0..s2.len() {
            assert_eq!(g[0].ids[p + s1.len() + 2], s2.ids[p]);
        }
        g[0].validate().unwrap();

        let g = group_sentences(&[s1.clone(), s2], 7).unwrap();
        assert_eq!(g.len(), 2);
        assert!(matches!(group_sentences(&[s1], 4), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn corpus_file_round_trip() {
        let lex = Lexicon::default();
        let corpus = lex.gen_corpus(Domain::Specific, 30, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        write_corpus(&p, lex.vocab(), &corpus).unwrap();
        let (v, back) = read_corpus(&p).unwrap();
        assert_eq!(&v, lex.vocab());
        assert_eq!(back, corpus);
    }
}
