use std::path::Path;

use super::vocab::{preprocess, Vocab};
use crate::error::{Error, Result};

/// A marker-wrapped source/target token pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParaphrasePair {
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl ParaphrasePair {
    pub fn from_text(src: &str, tgt: &str, vocab: &Vocab) -> Result<Self> {
        Ok(ParaphrasePair { src: preprocess(src, vocab)?, tgt: preprocess(tgt, vocab)? })
    }
}

/// Raw `source<TAB>target` lines. Lines starting with `#` and blank lines
/// are skipped.
pub fn read_text_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 2 tab-separated columns, found {}", cols.len()),
            });
        }
        pairs.push((cols[0].to_string(), cols[1].to_string()));
    }
    if pairs.is_empty() {
        return Err(Error::Empty(format!("no pairs in {}", path.display())));
    }
    Ok(pairs)
}

pub fn load_pairs(path: &Path, vocab: &Vocab) -> Result<Vec<ParaphrasePair>> {
    read_text_pairs(path)?
        .iter()
        .enumerate()
        .map(|(i, (s, t))| {
            ParaphrasePair::from_text(s, t, vocab).map_err(|e| Error::Data {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_text_pairs(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (s, t) in pairs {
        out.push_str(s);
        out.push('\t');
        out.push_str(t);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Every line of a file, blank ones included.
pub fn read_text_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// One sentence per line; blank lines skipped.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["how do i learn rust what is the best way to learn"])
    }

    #[test]
    fn loads_in_order_and_skips_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pairs.tsv");
        std::fs::write(&p, "# header\nhow do i learn rust\twhat is the best way to learn rust\nlearn rust\thow to learn rust\n").unwrap();
        let pairs = load_pairs(&p, &vocab()).unwrap();
        assert_eq!(pairs.len(), 2);
        let v = vocab();
        assert_eq!(v.detokenize(&pairs[0].src), "how do i learn rust");
        assert_eq!(v.detokenize(&pairs[1].tgt), "how to learn rust");
    }

    #[test]
    fn extra_columns_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.tsv");
        std::fs::write(&p, "a\tb\nx\ty\tz\tw\n").unwrap();
        match load_pairs(&p, &vocab()) {
            Err(Error::Data { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tsv");
        std::fs::write(&p, "# only a comment\n").unwrap();
        assert!(matches!(load_pairs(&p, &vocab()), Err(Error::Empty(_))));
    }
}
