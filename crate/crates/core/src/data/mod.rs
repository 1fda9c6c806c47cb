//! Vocabulary, the synthetic two-domain corpus, sentence packing and the
//! whole-word-masking collator.

mod collate;
mod corpus;
mod vocab;

pub use collate::{batch_seed, wwm_collate, CollatedBatch, Corruption};
pub use corpus::{
    group_sentences, read_corpus, vocab_path, write_corpus, AnnotatedSequence, Domain, Lexicon, LexiconConfig,
    DEFAULT_LEXICON_SEED,
};
pub use vocab::{Vocab, CLS, JOINER, MASK, NUM_SPECIAL, PAD, SEP, UNK};
