use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::ngram::{clipped_overlap, ngram_counts, ngram_total};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeMode {
    #[default]
    Recall,
    F1,
}

/// Clipped overlap, candidate n-gram count and reference n-gram count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RougeStats {
    pub overlap: u64,
    pub cand_total: u64,
    pub ref_total: u64,
}

impl RougeStats {
    pub fn add(&mut self, o: &RougeStats) {
        self.overlap += o.overlap;
        self.cand_total += o.cand_total;
        self.ref_total += o.ref_total;
    }

    pub fn score(&self, mode: RougeMode) -> f64 {
        let recall = if self.ref_total == 0 { 0.0 } else { self.overlap as f64 / self.ref_total as f64 };
        match mode {
            RougeMode::Recall => recall,
            RougeMode::F1 => {
                let precision = if self.cand_total == 0 { 0.0 } else { self.overlap as f64 / self.cand_total as f64 };
                if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                }
            }
        }
    }
}

pub fn rouge_stats<T: Hash + Eq>(cand: &[T], reference: &[T], n: usize) -> RougeStats {
    RougeStats {
        overlap: clipped_overlap(&ngram_counts(cand, n), &ngram_counts(reference, n)),
        cand_total: ngram_total(cand.len(), n),
        ref_total: ngram_total(reference.len(), n),
    }
}

/// ROUGE-n recall (or F1) of one candidate.
pub fn rouge_n<T: Hash + Eq>(cand: &[T], reference: &[T], n: usize, mode: RougeMode) -> Result<f64> {
    if !(1..=2).contains(&n) {
        return Err(Error::Config(format!("ROUGE order {n} outside 1..=2")));
    }
    if reference.len() < n {
        return Err(Error::Empty(format!("reference shorter than {n} tokens")));
    }
    Ok(rouge_stats(cand, reference, n).score(mode))
}
