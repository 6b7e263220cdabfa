use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bleu::{bleu_stats, check_alpha, BleuStats};
use super::rouge::{rouge_stats, RougeMode, RougeStats};
use crate::data::{read_text_lines, RESERVED};
use crate::error::{Error, Result};

/// The paper's balance between reference similarity and source copying.
pub const IBLEU_ALPHA: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alpha: f64,
    pub rouge_mode: RougeMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { alpha: IBLEU_ALPHA, rouge_mode: RougeMode::Recall }
    }
}

/// Corpus scores scaled by 100.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub bleu2: f64,
    pub bleu4: f64,
    pub ibleu: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub pairs: usize,
    pub alpha: f64,
    pub rouge_mode: RougeMode,
}

/// Whitespace tokens with markers removed.
pub fn tokens(line: &str) -> Vec<&str> {
    line.split_whitespace().filter(|t| !RESERVED[..3].contains(t)).collect()
}

/// Scores generated lines against aligned references (one or more per line)
/// and sources. ROUGE uses the first reference.
pub fn evaluate_corpus(gen: &[String], refs: &[Vec<String>], src: &[String], cfg: &EvalConfig) -> Result<MetricReport> {
    check_alpha(cfg.alpha)?;
    if gen.len() != refs.len() || gen.len() != src.len() {
        return Err(Error::LengthMismatch(format!(
            "{} generated, {} reference, {} source lines",
            gen.len(),
            refs.len(),
            src.len()
        )));
    }
    let (mut b_ref, mut b_src) = (BleuStats::default(), BleuStats::default());
    let (mut r1, mut r2) = (RougeStats::default(), RougeStats::default());
    for ((g, rs), s) in gen.iter().zip(refs).zip(src) {
        let cand = tokens(g);
        let rtoks: Vec<Vec<&str>> = rs.iter().map(|r| tokens(r)).collect();
        if rtoks.is_empty() {
            return Err(Error::Empty("reference set".into()));
        }
        let rslices: Vec<&[&str]> = rtoks.iter().map(Vec::as_slice).collect();
        b_ref.add(&bleu_stats(&cand, &rslices));
        b_src.add(&bleu_stats(&cand, &[tokens(s).as_slice()]));
        r1.add(&rouge_stats(&cand, &rtoks[0], 1));
        r2.add(&rouge_stats(&cand, &rtoks[0], 2));
    }
    let bleu4 = b_ref.score(4, false);
    Ok(MetricReport {
        bleu2: 100.0 * b_ref.score(2, false),
        bleu4: 100.0 * bleu4,
        ibleu: 100.0 * (cfg.alpha * bleu4 - (1.0 - cfg.alpha) * b_src.score(4, false)),
        rouge1: 100.0 * r1.score(cfg.rouge_mode),
        rouge2: 100.0 * r2.score(cfg.rouge_mode),
        pairs: gen.len(),
        alpha: cfg.alpha,
        rouge_mode: cfg.rouge_mode,
    })
}

/// File form of [`evaluate_corpus`]: each reference file contributes one
/// reference per line.
pub fn evaluate_files(gen: &Path, refs: &[&Path], src: &Path, cfg: &EvalConfig) -> Result<MetricReport> {
    let gen_lines = read_text_lines(gen)?;
    let src_lines = read_text_lines(src)?;
    if refs.is_empty() {
        return Err(Error::Empty("reference files".into()));
    }
    let mut ref_sets: Vec<Vec<String>> = vec![Vec::new(); gen_lines.len()];
    for path in refs {
        let lines = read_text_lines(path)?;
        if lines.len() != gen_lines.len() {
            return Err(Error::LengthMismatch(format!(
                "{} has {} lines, {} has {}",
                path.display(),
                lines.len(),
                gen.display(),
                gen_lines.len()
            )));
        }
        for (set, l) in ref_sets.iter_mut().zip(lines) {
            set.push(l);
        }
    }
    evaluate_corpus(&gen_lines, &ref_sets, &src_lines, cfg)
}

impl MetricReport {
    fn rows(&self) -> [(&'static str, f64); 5] {
        [("bleu2", self.bleu2), ("bleu4", self.bleu4), ("ibleu", self.ibleu), ("rouge1", self.rouge1), ("rouge2", self.rouge2)]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k},{v:.6}");
        }
        let _ = writeln!(s, "pairs,{}", self.pairs);
        let _ = writeln!(s, "alpha,{}", self.alpha);
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k:<8}{v:>10.2}");
        }
        let _ = writeln!(s, "{:<8}{:>10}", "pairs", self.pairs);
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{bleu_n, ibleu, rouge_n};

    fn lines(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn identity_corpus_scores_100() {
        let refs = lines(&["the cat sat on the mat", "a dog ran home fast"]);
        let src = lines(&["x y z", "p q r s"]);
        let sets: Vec<Vec<String>> = refs.iter().map(|r| vec![r.clone()]).collect();
        let r = evaluate_corpus(&refs, &sets, &src, &EvalConfig::default()).unwrap();
        for v in [r.bleu2, r.bleu4, r.rouge1, r.rouge2] {
            assert!((v - 100.0).abs() < 1e-9);
        }
        assert!((r.ibleu - 90.0).abs() < 1e-9);
        assert_eq!(r.alpha, 0.9);
    }

    #[test]
    fn single_pair_equals_sentence_level() {
        let (c, rf, s) = ("the cat sat", "the cat sat down", "the cat sat");
        let r = evaluate_corpus(&lines(&[c]), &[lines(&[rf])], &lines(&[s]), &EvalConfig::default()).unwrap();
        let (cw, rw, sw) = (tokens(c), tokens(rf), tokens(s));
        assert!((r.bleu2 - 100.0 * bleu_n(&cw, &[&rw], 2).unwrap()).abs() < 1e-9);
        assert!((r.ibleu - 100.0 * ibleu(&cw, &[&rw], &sw, 0.9).unwrap()).abs() < 1e-9);
        assert!((r.rouge2 - 100.0 * rouge_n(&cw, &rw, 2, RougeMode::Recall).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn markers_are_ignored() {
        let a = evaluate_corpus(&lines(&["<s> a b c </s>"]), &[lines(&["a b c"])], &lines(&["q"]), &EvalConfig::default()).unwrap();
        assert!((a.bleu2 - 100.0).abs() < 1e-9);
    }

    #[test]
    fn misaligned_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (g, r, s) = (dir.path().join("g"), dir.path().join("r"), dir.path().join("s"));
        std::fs::write(&g, "a b\nc d\n").unwrap();
        std::fs::write(&r, "a b\n").unwrap();
        std::fs::write(&s, "a b\nc d\n").unwrap();
        assert!(matches!(evaluate_files(&g, &[&r], &s, &EvalConfig::default()), Err(Error::LengthMismatch(_))));
    }

    #[test]
    fn csv_layout() {
        let r = evaluate_corpus(&lines(&["a b"]), &[lines(&["a b"])], &lines(&["c"]), &EvalConfig::default()).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,value\nbleu2,100.000000\n"));
        assert!(r.to_table().contains("bleu2"));
    }
}
