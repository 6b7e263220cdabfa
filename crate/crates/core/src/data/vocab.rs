use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;

/// Reserved tokens, in id order.
pub const RESERVED: [&str; 5] = ["<s>", "</s>", "<pad>", "<mask>", "<unk>"];

/// Content words kept per sentence.
pub const MAX_WORDS: usize = 20;

/// Token <-> id bijection. Ids 0..5 are the reserved markers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len());
                tokens.push(w.to_string());
            }
        }
        Vocab { tokens, index }
    }

    /// Lowercased whitespace tokens of `sentences`, sorted, after the
    /// reserved markers.
    pub fn build<I, S>(sentences: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = sentences
            .into_iter()
            .flat_map(|s| s.as_ref().to_lowercase().split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        Vocab::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_marker(id: usize) -> bool {
        matches!(id, BOS | EOS | PAD)
    }

    /// Marker-stripped, space-joined text.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        self.words(ids).join(" ")
    }

    pub fn words<'a>(&'a self, ids: &[usize]) -> Vec<&'a str> {
        ids.iter()
            .filter(|&&id| !Vocab::is_marker(id))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens[RESERVED.len()..].join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Ok(Vocab::from_tokens(text.lines().filter(|l| !l.is_empty())))
    }
}

/// Lowercases, splits on whitespace, keeps at most [`MAX_WORDS`] words,
/// maps unknown words to `<unk>` and wraps the result in `<s>`/`</s>`.
pub fn preprocess(text: &str, vocab: &Vocab) -> Result<Vec<usize>> {
    let lower = text.to_lowercase();
    let mut ids = vec![BOS];
    ids.extend(lower.split_whitespace().take(MAX_WORDS).map(|w| vocab.id(w)));
    if ids.len() == 1 {
        return Err(Error::Empty(format!("no words in {text:?}")));
    }
    ids.push(EOS);
    Ok(ids)
}
