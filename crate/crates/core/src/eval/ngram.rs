use std::collections::HashMap;
use std::hash::Hash;

pub(crate) fn ngram_counts<T: Hash + Eq>(tokens: &[T], k: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if k == 0 || tokens.len() < k {
        return m;
    }
    for w in tokens.windows(k) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Overlap of `cand` k-grams clipped by their count in `reference`.
pub(crate) fn clipped_overlap<T: Hash + Eq>(cand: &HashMap<&[T], u64>, reference: &HashMap<&[T], u64>) -> u64 {
    cand.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

pub(crate) fn ngram_total(len: usize, k: usize) -> u64 {
    (len + 1).saturating_sub(k) as u64
}
