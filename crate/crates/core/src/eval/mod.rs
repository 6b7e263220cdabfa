//! BLEU, iBLEU and ROUGE, at sentence and corpus level.
//!
//! Tokens are compared as whitespace-separated strings with the sentence
//! markers removed. Corpus scores sum n-gram statistics over pairs before
//! taking ratios and are unsmoothed.

mod bleu;
mod ngram;
mod report;
mod rouge;

pub use bleu::{bleu_n, bleu_n_smoothed, bleu_stats, corpus_bleu, ibleu, BleuStats, MAX_ORDER, SMOOTHING_EPS};
pub use report::{evaluate_corpus, evaluate_files, tokens, EvalConfig, MetricReport, IBLEU_ALPHA};
pub use rouge::{rouge_n, rouge_stats, RougeMode, RougeStats};
