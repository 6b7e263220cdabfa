//! Template-based synthetic paraphrase domains.
//!
//! A domain fills shared templates with words from its vocabulary slots to
//! produce the source sentence. The target substitutes each word that has a
//! synonym in the domain's map and then applies the reorder rules.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `A pivot B` becomes `B replacement A`, split at the first pivot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReorderRule {
    pub pivot: String,
    pub replacement: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub seed: u64,
    /// Templates with `{slot}` placeholders.
    pub templates: Vec<String>,
    #[serde(default)]
    pub reorders: Vec<ReorderRule>,
    pub vocabulary: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub synonyms: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SynthOutput {
    pub pairs: Vec<(String, String)>,
    /// Every source and target sentence, for denoising pretraining.
    pub unlabeled: Vec<String>,
}

enum Piece<'a> {
    Word(&'a str),
    Slot(&'a str),
}

fn parse_template(t: &str) -> Vec<Piece<'_>> {
    t.split_whitespace()
        .map(|w| match w.strip_prefix('{').and_then(|r| r.strip_suffix('}')) {
            Some(slot) => Piece::Slot(slot),
            None => Piece::Word(w),
        })
        .collect()
}

impl DomainSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: DomainSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        DomainSpec::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Words the domain can emit on the source side.
    fn source_words(&self) -> BTreeSet<&str> {
        let mut words: BTreeSet<&str> = self.vocabulary.values().flatten().map(String::as_str).collect();
        for t in &self.templates {
            for p in parse_template(t) {
                if let Piece::Word(w) = p {
                    words.insert(w);
                }
            }
        }
        words
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config(format!("domain {}: no templates", self.name)));
        }
        for t in &self.templates {
            let pieces = parse_template(t);
            if pieces.is_empty() {
                return Err(Error::Config(format!("domain {}: empty template", self.name)));
            }
            for p in pieces {
                if let Piece::Slot(s) = p {
                    match self.vocabulary.get(s) {
                        Some(words) if !words.is_empty() => {}
                        _ => {
                            return Err(Error::Config(format!(
                                "domain {}: slot {{{s}}} has no vocabulary",
                                self.name
                            )))
                        }
                    }
                }
            }
        }
        let words = self.source_words();
        for (w, alts) in &self.synonyms {
            if !words.contains(w.as_str()) {
                return Err(Error::Config(format!(
                    "domain {}: synonym key {w:?} is not in the domain vocabulary",
                    self.name
                )));
            }
            if alts.is_empty() {
                return Err(Error::Config(format!("domain {}: no synonyms for {w:?}", self.name)));
            }
        }
        Ok(())
    }

    /// Every token either side of a pair can contain.
    pub fn all_tokens(&self) -> BTreeSet<String> {
        let mut out: BTreeSet<String> = self.source_words().into_iter().map(str::to_string).collect();
        out.extend(self.synonyms.values().flatten().cloned());
        out.extend(self.reorders.iter().map(|r| r.replacement.clone()));
        out
    }
}

fn reorder(words: Vec<String>, rules: &[ReorderRule]) -> Vec<String> {
    for r in rules {
        if let Some(p) = words.iter().position(|w| *w == r.pivot) {
            if p == 0 || p + 1 == words.len() {
                continue;
            }
            let mut out = words[p + 1..].to_vec();
            out.push(r.replacement.clone());
            out.extend_from_slice(&words[..p]);
            return out;
        }
    }
    words
}

/// Samples `n_pairs` pairs from the domain's own seed.
pub fn synth_domain(spec: &DomainSpec, n_pairs: usize) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let templates: Vec<Vec<Piece>> = spec.templates.iter().map(|t| parse_template(t)).collect();
    let mut out = SynthOutput::default();
    for _ in 0..n_pairs {
        let template = templates.choose(&mut rng).expect("validated non-empty");
        let mut src = Vec::with_capacity(template.len());
        for piece in template {
            let w = match piece {
                Piece::Word(w) => w.to_string(),
                Piece::Slot(s) => spec.vocabulary[*s].choose(&mut rng).expect("validated non-empty").clone(),
            };
            src.push(w);
        }
        let mut tgt = Vec::with_capacity(src.len());
        for w in &src {
            let t = match spec.synonyms.get(w) {
                Some(alts) => alts.choose(&mut rng).expect("validated non-empty").clone(),
                None => w.clone(),
            };
            tgt.push(t);
        }
        let tgt = reorder(tgt, &spec.reorders);
        let (s, t) = (src.join(" "), tgt.join(" "));
        out.unlabeled.push(s.clone());
        out.unlabeled.push(t.clone());
        out.pairs.push((s, t));
    }
    Ok(out)
}

const NOUNS: [&str; 16] = [
    "cat", "dog", "bird", "horse", "farmer", "doctor", "teacher", "child", "river", "garden", "house", "ship",
    "city", "forest", "king", "baker",
];
const VERBS: [&str; 12] =
    ["sees", "likes", "follows", "helps", "finds", "watches", "calls", "meets", "paints", "carries", "visits", "feeds"];
const ADJECTIVES: [&str; 10] = ["old", "young", "small", "large", "quiet", "happy", "brave", "green", "cold", "bright"];

const TEMPLATES: [&str; 10] = [
    "the {adj} {noun} {verb} the {noun}",
    "the {noun} {verb} a {adj} {noun}",
    "a {noun} {verb} the {noun} because the {noun} is {adj}",
    "the {noun} is {adj} because it {verb} the {noun}",
    "the {adj} {noun} {verb} the {noun} because it is {adj}",
    "why does the {noun} {verb} the {adj} {noun}",
    "the {noun} and the {noun} are {adj}",
    "the {noun} {verb} the {noun} in the {adj} {noun}",
    "a {adj} {noun} {verb} a {noun} because the {noun} is {adj}",
    "every {noun} {verb} the {adj} {noun}",
];

/// Synonyms available for each content word, and so the largest family.
pub const SYNONYMS_PER_WORD: usize = 6;

/// A family of related domains. All domains share the templates, the
/// content words and the `because -> so` reorder. Every content word `w` has
/// the synonyms `w_1 ..= w_6`, and each domain always writes one of them.
/// The choice is a per-word permutation over the family, so no two domains
/// share a substitution: what transfers is the structure of the task, not
/// the lexicon.
pub fn synonym_domains(names: &[&str], seed: u64) -> Result<Vec<DomainSpec>> {
    if names.is_empty() {
        return Err(Error::Config("no domain names".into()));
    }
    let vocabulary: BTreeMap<String, Vec<String>> = [("noun", &NOUNS[..]), ("verb", &VERBS[..]), ("adj", &ADJECTIVES[..])]
        .into_iter()
        .map(|(k, ws)| (k.to_string(), ws.iter().map(|w| w.to_string()).collect()))
        .collect();
    if names.len() > SYNONYMS_PER_WORD {
        return Err(Error::Config(format!(
            "{} domains requested, the family supports {SYNONYMS_PER_WORD}",
            names.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, "lexicon"));
    let choices: Vec<(&str, Vec<usize>)> = NOUNS
        .iter()
        .chain(&VERBS)
        .chain(&ADJECTIVES)
        .map(|&w| {
            let mut ks: Vec<usize> = (1..=SYNONYMS_PER_WORD).collect();
            ks.shuffle(&mut rng);
            (w, ks)
        })
        .collect();
    names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let synonyms = choices.iter().map(|(w, ks)| (w.to_string(), vec![format!("{w}_{}", ks[i])])).collect();
            Ok(DomainSpec {
                name: name.to_string(),
                seed: crate::seed::derive(seed, &format!("domain/{name}")),
                templates: TEMPLATES.iter().map(|t| t.to_string()).collect(),
                reorders: vec![ReorderRule { pivot: "because".into(), replacement: "so".into() }],
                vocabulary: vocabulary.clone(),
                synonyms,
            })
        })
        .collect()
}

/// Every token the synonym family can produce.
pub fn synonym_family_tokens() -> BTreeSet<String> {
    let mut out: BTreeSet<String> = TEMPLATES
        .iter()
        .flat_map(|t| parse_template(t).into_iter().filter_map(|p| match p {
            Piece::Word(w) => Some(w.to_string()),
            Piece::Slot(_) => None,
        }))
        .collect();
    out.insert("so".into());
    for w in NOUNS.iter().chain(&VERBS).chain(&ADJECTIVES) {
        out.insert(w.to_string());
        for k in 1..=SYNONYMS_PER_WORD {
            out.insert(format!("{w}_{k}"));
        }
    }
    out
}
