use std::collections::HashMap;
use std::hash::Hash;

use super::ngram::{ngram_counts, ngram_total};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Add-ε replacement for zero match counts in sentence-level diagnostics.
pub const SMOOTHING_EPS: f64 = 0.1;

/// Sufficient statistics of BLEU; corpus BLEU sums them over pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub cand_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, o: &BleuStats) {
        for k in 0..MAX_ORDER {
            self.matches[k] += o.matches[k];
            self.totals[k] += o.totals[k];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    /// Geometric mean of the modified precisions of orders 1..=n times the
    /// brevity penalty. Orders with no candidate n-grams at all (candidate
    /// shorter than the order) are left out of the mean.
    pub fn score(&self, n: usize, smooth: bool) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0;
        for k in 0..n {
            if self.totals[k] == 0 {
                continue;
            }
            let m = self.matches[k] as f64;
            let p = if self.matches[k] == 0 {
                if !smooth {
                    return 0.0;
                }
                SMOOTHING_EPS / self.totals[k] as f64
            } else {
                m / self.totals[k] as f64
            };
            log_sum += p.ln();
            orders += 1;
        }
        let (c, r) = (self.cand_len as f64, self.ref_len as f64);
        let bp = (1.0 - r / c).min(0.0).exp();
        bp * (log_sum / orders as f64).exp()
    }
}

/// Length of the reference closest to `cand_len`; ties go to the shorter.
fn closest_ref_len(cand_len: usize, refs: &[&[impl Sized]]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(cand_len), l))
        .unwrap_or(0)
}

/// Statistics of one candidate against one or more references. Each n-gram
/// is clipped by its largest count in any single reference.
pub fn bleu_stats<T: Hash + Eq>(cand: &[T], refs: &[&[T]]) -> BleuStats {
    let mut s = BleuStats { cand_len: cand.len() as u64, ref_len: closest_ref_len(cand.len(), refs) as u64, ..Default::default() };
    for k in 1..=MAX_ORDER {
        let cc = ngram_counts(cand, k);
        let mut max_ref: HashMap<&[T], u64> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, k) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.matches[k - 1] = cc.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        s.totals[k - 1] = ngram_total(cand.len(), k);
    }
    s
}

fn check_order(n: usize) -> Result<()> {
    if !(1..=MAX_ORDER).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} outside 1..={MAX_ORDER}")));
    }
    Ok(())
}

/// Sentence BLEU-n, unsmoothed.
pub fn bleu_n<T: Hash + Eq>(cand: &[T], refs: &[&[T]], n: usize) -> Result<f64> {
    check_order(n)?;
    if cand.is_empty() {
        return Err(Error::Empty("candidate".into()));
    }
    if refs.is_empty() {
        return Err(Error::Empty("reference set".into()));
    }
    Ok(bleu_stats(cand, refs).score(n, false))
}

/// Sentence BLEU-n with add-ε smoothing of zero match counts.
pub fn bleu_n_smoothed<T: Hash + Eq>(cand: &[T], refs: &[&[T]], n: usize) -> Result<f64> {
    bleu_n(cand, refs, n)?;
    Ok(bleu_stats(cand, refs).score(n, true))
}

/// Corpus BLEU-n: statistics are summed over pairs before the ratio.
pub fn corpus_bleu<T: Hash + Eq>(cands: &[Vec<T>], refs: &[Vec<&[T]>], n: usize) -> Result<f64> {
    check_order(n)?;
    if cands.len() != refs.len() {
        return Err(Error::LengthMismatch(format!("{} candidates, {} reference sets", cands.len(), refs.len())));
    }
    let mut total = BleuStats::default();
    for (c, r) in cands.iter().zip(refs) {
        if r.is_empty() {
            return Err(Error::Empty("reference set".into()));
        }
        total.add(&bleu_stats(c, r));
    }
    Ok(total.score(n, false))
}

/// `alpha * BLEU-4(cand, ref) - (1 - alpha) * BLEU-4(cand, src)`.
pub fn ibleu<T: Hash + Eq>(cand: &[T], refs: &[&[T]], src: &[T], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * bleu_n(cand, refs, 4)? - (1.0 - alpha) * bleu_n(cand, &[src], 4)?)
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}
