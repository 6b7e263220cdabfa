//! Vocabulary, preprocessing, paraphrase corpora and meta-task sampling.

mod corpus;
mod pairs;
mod synth;
mod vocab;

pub use corpus::{sample_batch, sample_meta_task, DomainData, MetaTask};
pub use pairs::{load_pairs, read_lines, read_text_lines, read_text_pairs, write_lines, write_text_pairs, ParaphrasePair};
pub use synth::{
    synonym_domains, synonym_family_tokens, synth_domain, DomainSpec, ReorderRule, SynthOutput, SYNONYMS_PER_WORD,
};
pub use vocab::{preprocess, Vocab, BOS, EOS, MASK, MAX_WORDS, PAD, RESERVED, UNK};
