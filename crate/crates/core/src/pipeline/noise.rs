use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Vocab, MASK};
use crate::error::{Error, Result};

/// Token masking then deletion, applied to non-marker tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub mask_prob: f64,
    pub delete_prob: f64,
    pub mask_id: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { mask_prob: 0.3, delete_prob: 0.1, mask_id: MASK, seed: 0 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("mask_prob", self.mask_prob), ("delete_prob", self.delete_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Corrupts `tokens` with randomness from `rng`. Two uniforms are drawn per
/// non-marker token, so the stream position does not depend on outcomes.
pub fn corrupt_with<R: Rng + ?Sized>(tokens: &[usize], noise: &NoiseConfig, rng: &mut R) -> Vec<usize> {
    let mut out = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if Vocab::is_marker(t) {
            out.push(t);
            continue;
        }
        let (m, d): (f64, f64) = (rng.random(), rng.random());
        let t = if m < noise.mask_prob { noise.mask_id } else { t };
        if d >= noise.delete_prob {
            out.push(t);
        }
    }
    out
}

/// Corrupts `tokens` with a generator seeded from `noise.seed`.
pub fn corrupt(tokens: &[usize], noise: &NoiseConfig) -> Vec<usize> {
    corrupt_with(tokens, noise, &mut ChaCha8Rng::seed_from_u64(noise.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS, EOS};

    fn input() -> Vec<usize> {
        let mut t = vec![BOS];
        t.extend(10..20);
        t.push(EOS);
        t
    }

    #[test]
    fn zero_noise_is_identity() {
        let n = NoiseConfig { mask_prob: 0.0, delete_prob: 0.0, ..Default::default() };
        assert_eq!(corrupt(&input(), &n), input());
    }

    #[test]
    fn full_masking_keeps_markers() {
        let n = NoiseConfig { mask_prob: 1.0, delete_prob: 0.0, ..Default::default() };
        let out = corrupt(&input(), &n);
        assert_eq!(out.len(), 12);
        assert_eq!((out[0], out[11]), (BOS, EOS));
        assert!(out[1..11].iter().all(|&t| t == MASK));
    }

    #[test]
    fn golden_pattern() {
        let n = NoiseConfig { mask_prob: 0.3, delete_prob: 0.0, mask_id: MASK, seed: 42 };
        assert_eq!(corrupt(&input(), &n), GOLDEN);
    }

    const GOLDEN: [usize; 12] = [0, 10, 11, 3, 13, 14, 15, 16, 17, 18, 19, 1];

    #[test]
    fn rejects_bad_probabilities() {
        assert!(NoiseConfig { mask_prob: 1.5, ..Default::default() }.validate().is_err());
    }
}
