use rand::seq::index;
use rand::Rng;

use super::pairs::ParaphrasePair;
use crate::error::{Error, Result};

/// Train/valid/test pairs of one domain.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DomainData {
    pub name: String,
    pub train: Vec<ParaphrasePair>,
    pub valid: Vec<ParaphrasePair>,
    pub test: Vec<ParaphrasePair>,
}

impl DomainData {
    /// The last `n_test` pairs become test, the `n_valid` before them valid.
    pub fn split(name: impl Into<String>, mut pairs: Vec<ParaphrasePair>, n_valid: usize, n_test: usize) -> Result<Self> {
        let name = name.into();
        if n_valid + n_test > pairs.len() {
            return Err(Error::CorpusTooSmall { need: n_valid + n_test, have: pairs.len() });
        }
        let test = pairs.split_off(pairs.len() - n_test);
        let valid = pairs.split_off(pairs.len() - n_valid);
        Ok(DomainData { name, train: pairs, valid, test })
    }
}

/// Support and query batches drawn from one domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaTask {
    pub domain: usize,
    pub support: Vec<ParaphrasePair>,
    pub query: Vec<ParaphrasePair>,
}

/// Picks a domain uniformly among those with at least `batch` training
/// pairs, then `batch` distinct pairs from it. Without `shared`, the first
/// half is the support set and the rest the query set; with `shared`, both
/// are the whole batch.
pub fn sample_meta_task<R: Rng + ?Sized>(
    domains: &[DomainData],
    batch: usize,
    shared: bool,
    rng: &mut R,
) -> Result<MetaTask> {
    if batch == 0 || (!shared && batch < 2) {
        return Err(Error::Config(format!("task batch size {batch} cannot be split into support and query")));
    }
    let eligible: Vec<usize> = (0..domains.len()).filter(|&i| domains[i].train.len() >= batch).collect();
    if eligible.is_empty() {
        let have = domains.iter().map(|d| d.train.len()).max().unwrap_or(0);
        return Err(Error::CorpusTooSmall { need: batch, have });
    }
    let domain = eligible[rng.random_range(0..eligible.len())];
    let train = &domains[domain].train;
    let picked: Vec<ParaphrasePair> =
        index::sample(rng, train.len(), batch).into_iter().map(|i| train[i].clone()).collect();
    let (support, query) = if shared {
        (picked.clone(), picked)
    } else {
        let half = batch / 2;
        (picked[..half].to_vec(), picked[half..].to_vec())
    };
    Ok(MetaTask { domain, support, query })
}

/// `n` distinct pairs from `pool`, or all of it when smaller.
pub fn sample_batch<R: Rng + ?Sized>(pool: &[ParaphrasePair], n: usize, rng: &mut R) -> Vec<ParaphrasePair> {
    let n = n.min(pool.len());
    index::sample(rng, pool.len(), n).into_iter().map(|i| pool[i].clone()).collect()
}
