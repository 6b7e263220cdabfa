//! Greedy and beam-search decoding.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{preprocess, read_text_lines, Vocab, BOS, EOS, MAX_WORDS};
use crate::error::{Error, Result};
use crate::model::{decode as decode_logits, encode, Bindings, Memory, ModelConfig, ParamStore};
use crate::pipeline::Checkpoint;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    /// Cap on the output length, markers included.
    pub max_decode_len: usize,
    /// Hypothesis score is the log-probability sum over `len^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { strategy: Strategy::Greedy, beam_width: 4, max_decode_len: MAX_WORDS + 2, length_penalty: 0.0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_decode_len < 2 || self.max_decode_len > cfg.max_len {
            return Err(Error::Config(format!(
                "max_decode_len {} outside 2..={}",
                self.max_decode_len, cfg.max_len
            )));
        }
        Ok(())
    }
}

/// Next-token logits for decoder prefixes of one source.
pub trait NextToken {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// A model with its encoder output cached for one source sentence.
pub struct ModelStepper<'a> {
    cfg: &'a ModelConfig,
    g: Graph,
    b: Bindings,
    memory: Memory,
    base: usize,
}

impl<'a> ModelStepper<'a> {
    pub fn new(params: &ParamStore, cfg: &'a ModelConfig, src: &[usize]) -> Result<Self> {
        let mut g = Graph::new();
        let b = Bindings::constants(&mut g, params);
        let memory = encode(&mut g, &b, cfg, &[src])?;
        let base = g.len();
        Ok(ModelStepper { cfg, g, b, memory, base })
    }
}

impl NextToken for ModelStepper<'_> {
    fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
        let logits = decode_logits(&mut self.g, &self.b, self.cfg, &self.memory, &[prefix])?;
        let v = self.g.value(logits);
        let width = v.shape()[1];
        let row = v.data()[(prefix.len() - 1) * width..].to_vec();
        self.g.truncate(self.base);
        Ok(row)
    }
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

fn hyp_score(logp: f64, generated: usize, penalty: f64) -> f64 {
    if penalty == 0.0 {
        logp
    } else {
        logp / (generated.max(1) as f64).powf(penalty)
    }
}

/// Length-penalized log-probability of a marker-wrapped output.
pub fn sequence_score<M: NextToken>(model: &mut M, seq: &[usize], penalty: f64) -> Result<f64> {
    let mut logp = 0.0;
    for t in 1..seq.len() {
        logp += log_softmax(&model.next_logits(&seq[..t])?)[seq[t]];
    }
    Ok(hyp_score(logp, seq.len() - 1, penalty))
}

pub fn greedy<M: NextToken>(model: &mut M, max_len: usize) -> Result<Vec<usize>> {
    let mut seq = vec![BOS];
    while seq.len() < max_len {
        let t = argmax(&model.next_logits(&seq)?);
        seq.push(t);
        if t == EOS {
            break;
        }
    }
    Ok(seq)
}

#[derive(Clone, Debug)]
struct Hyp {
    seq: Vec<usize>,
    logp: f64,
    done: bool,
}

/// Beam search over `width` hypotheses. The greedy output is scored too
/// and returned when it beats the beam, so the result never scores below it.
pub fn beam<M: NextToken>(model: &mut M, width: usize, max_len: usize, penalty: f64) -> Result<Vec<usize>> {
    let score = |h: &Hyp| hyp_score(h.logp, h.seq.len() - 1, penalty);
    let mut beams = vec![Hyp { seq: vec![BOS], logp: 0.0, done: false }];
    while beams.iter().any(|h| !h.done) {
        let mut pool = Vec::new();
        for h in &beams {
            if h.done {
                pool.push(h.clone());
                continue;
            }
            let lp = log_softmax(&model.next_logits(&h.seq)?);
            for (t, &l) in lp.iter().enumerate() {
                let mut seq = h.seq.clone();
                seq.push(t);
                let done = t == EOS || seq.len() >= max_len;
                pool.push(Hyp { seq, logp: h.logp + l, done });
            }
        }
        pool.sort_by(|a, b| score(b).total_cmp(&score(a)).then_with(|| a.seq.cmp(&b.seq)));
        pool.truncate(width);
        beams = pool;
    }
    let best = beams.into_iter().next().expect("beam is never empty");
    if width == 1 {
        return Ok(best.seq);
    }
    let g = greedy(model, max_len)?;
    let gs = sequence_score(model, &g, penalty)?;
    Ok(if gs > score(&best) { g } else { best.seq })
}

pub fn decode_with<M: NextToken>(model: &mut M, dc: &DecodeConfig) -> Result<Vec<usize>> {
    match dc.strategy {
        Strategy::Greedy => greedy(model, dc.max_decode_len),
        Strategy::Beam => beam(model, dc.beam_width, dc.max_decode_len, dc.length_penalty),
    }
}

/// Marker-wrapped output ids for one source.
pub fn decode(params: &ParamStore, cfg: &ModelConfig, src: &[usize], dc: &DecodeConfig) -> Result<Vec<usize>> {
    dc.validate(cfg)?;
    decode_with(&mut ModelStepper::new(params, cfg, src)?, dc)
}

/// Detokenized outputs for raw input sentences. Blank lines stay blank so
/// the output remains aligned with the input.
pub fn generate_lines(ck: &Checkpoint, lines: &[String], dc: &DecodeConfig) -> Result<Vec<String>> {
    lines
        .iter()
        .map(|l| {
            if l.trim().is_empty() {
                return Ok(String::new());
            }
            let src = preprocess(l, &ck.vocab)?;
            let out = decode(ck.params(), &ck.config, &src, dc)?;
            Ok(ck.vocab.detokenize(&out))
        })
        .collect()
}

/// Decodes every line of `input` into the same line of `output`.
pub fn generate_file(checkpoint: &Path, input: &Path, output: &Path, dc: &DecodeConfig) -> Result<usize> {
    let ck = Checkpoint::load(checkpoint)?;
    let lines = read_text_lines(input)?;
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let gen = generate_lines(&ck, std::slice::from_ref(l), dc).map_err(|e| Error::Data {
            path: input.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push_str(&gen[0]);
        out.push('\n');
    }
    std::fs::write(output, out).map_err(|e| Error::io(format!("writing {}", output.display()), e))?;
    Ok(lines.len())
}

/// Convenience: decode a whole corpus of token sources to text.
pub fn decode_corpus(params: &ParamStore, cfg: &ModelConfig, vocab: &Vocab, srcs: &[&[usize]], dc: &DecodeConfig) -> Result<Vec<String>> {
    srcs.iter().map(|s| Ok(vocab.detokenize(&decode(params, cfg, s, dc)?))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::tensor::Array;
    use proptest::prelude::*;

    /// Logits looked up by prefix length.
    struct Table(Vec<Vec<f64>>);

    impl NextToken for Table {
        fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
            Ok(self.0[(prefix.len() - 1).min(self.0.len() - 1)].clone())
        }
    }

    fn one_hot(v: usize, i: usize) -> Vec<f64> {
        let mut x = vec![0.0; v];
        x[i] = 5.0;
        x
    }

    #[test]
    fn hand_logits_stop_at_eos() {
        let mut m = Table(vec![one_hot(10, 7), one_hot(10, 8), one_hot(10, EOS), one_hot(10, 9)]);
        assert_eq!(greedy(&mut m, 22).unwrap(), vec![BOS, 7, 8, EOS]);
        assert_eq!(beam(&mut m, 4, 22, 0.0).unwrap(), vec![BOS, 7, 8, EOS]);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        let mut m = Table(vec![vec![0.0; 6]]);
        assert_eq!(greedy(&mut m, 22).unwrap(), vec![0; 22]);
    }

    #[test]
    fn zero_model_repeats_the_lowest_id() {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, adapter_hidden: 4, ..ModelConfig::toy(12) };
        let mut store = build_model(&cfg, 0).unwrap();
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set(&n, Array::zeros(&shape)).unwrap();
        }
        let out = decode(&store, &cfg, &[BOS, 5, EOS], &DecodeConfig::default()).unwrap();
        assert_eq!(out, vec![0; 22]);
    }

    #[test]
    fn beam_finds_a_better_sequence_than_greedy() {
        // Greedy takes 5 (p=0.4 region) then faces a flat distribution;
        // token 6 leads to a confident EOS.
        struct Trap;
        impl NextToken for Trap {
            fn next_logits(&mut self, prefix: &[usize]) -> Result<Vec<f64>> {
                let mut x = vec![-10.0; 8];
                match prefix {
                    [_] => {
                        x[5] = 0.1;
                        x[6] = 0.0;
                    }
                    [_, 6] => x[EOS] = 10.0,
                    _ => x.iter_mut().for_each(|v| *v = 0.0),
                }
                Ok(x)
            }
        }
        let g = greedy(&mut Trap, 6).unwrap();
        let b = beam(&mut Trap, 2, 6, 0.0).unwrap();
        assert_eq!(b, vec![BOS, 6, EOS]);
        assert!(sequence_score(&mut Trap, &b, 0.0).unwrap() > sequence_score(&mut Trap, &g, 0.0).unwrap());
    }

    fn small() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, adapter_hidden: 4, ..ModelConfig::toy(12) };
        let store = build_model(&cfg, 9).unwrap();
        (cfg, store)
    }

    #[test]
    fn cached_stepper_matches_full_forward() {
        let (cfg, store) = small();
        let src = [BOS, 5, 6, EOS];
        let mut st = ModelStepper::new(&store, &cfg, &src).unwrap();
        let a = st.next_logits(&[BOS, 7]).unwrap();
        let b = st.next_logits(&[BOS, 7]).unwrap();
        let full = crate::model::forward(&store, &cfg, &src, &[BOS, 7]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.as_slice(), &full.data()[12..]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn beam_invariants(seed in 0u64..500, src in proptest::collection::vec(5usize..12, 1..6), w in 1usize..4, max_len in 2usize..10) {
            let (cfg, _) = small();
            let store = build_model(&cfg, seed).unwrap();
            let mut s = vec![BOS];
            s.extend(src);
            s.push(EOS);
            let mut st = ModelStepper::new(&store, &cfg, &s).unwrap();
            let g = greedy(&mut st, max_len).unwrap();
            let b = beam(&mut st, w, max_len, 0.0).unwrap();
            prop_assert!(g.len() <= max_len && b.len() <= max_len);
            if w == 1 {
                prop_assert_eq!(&b, &g);
            }
            let (gs, bs) = (sequence_score(&mut st, &g, 0.0).unwrap(), sequence_score(&mut st, &b, 0.0).unwrap());
            prop_assert!(bs >= gs);
        }
    }
}
