//! Binary checkpoint format.
//!
//! ```text
//! "LAPA" | u32 version | u32 len | header (TOML) | records...
//! record: u32 len | name | u8 partition | u8 rank | u64 extents... | f32 values...
//! ```
//!
//! All integers and floats are little-endian. Values are stored as binary32;
//! a checkpoint rounds its parameters when it is built, so what a later stage
//! reads from disk equals what it would have received in memory.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{param_layout, ModelConfig, ParamStore, Partition};
use crate::tensor::Array;

pub const MAGIC: &[u8; 4] = b"LAPA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Pretrained,
    MetaTrained,
    Finetuned,
}

impl StageTag {
    pub fn name(self) -> &'static str {
        match self {
            StageTag::Pretrained => "pretrained",
            StageTag::MetaTrained => "meta_trained",
            StageTag::Finetuned => "finetuned",
        }
    }
}

mod u64_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: StageTag,
    #[serde(with = "u64_text")]
    seed: u64,
    /// Finetuned straight from a pretrained checkpoint.
    ablation: bool,
    /// SHA-256 of each ancestor, oldest first.
    provenance: Vec<String>,
    notes: Vec<String>,
    vocab: Vec<String>,
    n_params: usize,
    model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: StageTag,
    pub seed: u64,
    pub ablation: bool,
    pub provenance: Vec<String>,
    pub notes: Vec<String>,
    pub vocab: Vocab,
    params: ParamStore,
}

impl Checkpoint {
    /// A root (pretrained) checkpoint. Parameters are rounded to binary32.
    pub fn root(config: ModelConfig, vocab: Vocab, params: ParamStore, seed: u64) -> Result<Self> {
        let ck = Checkpoint {
            config,
            stage: StageTag::Pretrained,
            seed,
            ablation: false,
            provenance: Vec::new(),
            notes: Vec::new(),
            vocab,
            params: params.rounded_to_f32(),
        };
        ck.check()?;
        Ok(ck)
    }

    /// A checkpoint derived from `self` at a later stage.
    pub fn child(&self, stage: StageTag, params: ParamStore, seed: u64) -> Result<Self> {
        let ablation = match (self.stage, stage) {
            (StageTag::Pretrained, StageTag::MetaTrained) | (StageTag::MetaTrained, StageTag::Finetuned) => false,
            (StageTag::Pretrained, StageTag::Finetuned) => true,
            (from, to) => {
                return Err(Error::Provenance(format!("cannot derive {} from {}", to.name(), from.name())));
            }
        };
        let mut provenance = self.provenance.clone();
        provenance.push(self.digest());
        let ck = Checkpoint {
            config: self.config.clone(),
            stage,
            seed,
            ablation,
            provenance,
            notes: self.notes.clone(),
            vocab: self.vocab.clone(),
            params: params.rounded_to_f32(),
        };
        ck.check()?;
        Ok(ck)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    fn expected_parents(&self) -> usize {
        match self.stage {
            StageTag::Pretrained => 0,
            StageTag::MetaTrained => 1,
            StageTag::Finetuned if self.ablation => 1,
            StageTag::Finetuned => 2,
        }
    }

    /// Provenance chain length and parameter layout against the config.
    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.provenance.len() != self.expected_parents() {
            return Err(Error::Provenance(format!(
                "{} checkpoint with {} ancestors (expected {})",
                self.stage.name(),
                self.provenance.len(),
                self.expected_parents()
            )));
        }
        if self.ablation && self.stage != StageTag::Finetuned {
            return Err(Error::Provenance("ablation flag on a non-finetuned checkpoint".into()));
        }
        if self.vocab.len() != self.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens for vocab_size {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        let layout = param_layout(&self.config);
        if layout.len() != self.params.len() {
            return Err(Error::shape("checkpoint", format!("{} parameters for a config with {}", self.params.len(), layout.len())));
        }
        for ((name, shape, tag), (pname, p)) in layout.iter().zip(self.params.iter()) {
            if name != pname || shape.as_slice() != p.value.shape() || Some(*tag) != p.tag {
                return Err(Error::shape(
                    "checkpoint",
                    format!("parameter {pname} {:?} does not match config entry {name} {shape:?}", p.value.shape()),
                ));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            seed: self.seed,
            ablation: self.ablation,
            provenance: self.provenance.clone(),
            notes: self.notes.clone(),
            vocab: self.vocab.tokens().to_vec(),
            n_params: self.params.len(),
            model: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for (name, p) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.tag.ok_or_else(|| Error::Untagged(name.clone()))?.tag_byte());
            out.push(p.value.rank() as u8);
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptCheckpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::CorruptCheckpoint("header is not UTF-8".into()))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let mut params = ParamStore::new();
        for _ in 0..header.n_params {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let tag = Partition::from_tag_byte(r.u8()?)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("bad partition tag for {name}")))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let n = n.filter(|&n| n <= bytes.len()).ok_or_else(|| Error::CorruptCheckpoint(format!("bad extents for {name}")))?;
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let value = Array::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
            params.insert(name, value, tag);
        }
        if r.pos != bytes.len() {
            return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ck = Checkpoint {
            config: header.model,
            stage: header.stage,
            seed: header.seed,
            ablation: header.ablation,
            provenance: header.provenance,
            notes: header.notes,
            vocab: Vocab::from_tokens(header.vocab.iter().skip(crate::data::RESERVED.len())),
            params,
        };
        if ck.vocab.tokens() != header.vocab.as_slice() {
            return Err(Error::CorruptCheckpoint("vocabulary does not start with the reserved tokens".into()));
        }
        ck.check()?;
        Ok(ck)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> String {
        let bytes = self.to_bytes().expect("a validated checkpoint serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Writes to a temporary sibling file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let ctx = |what: &str| format!("{what} {}", tmp.display());
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
        f.write_all(&bytes).map_err(|e| Error::io(ctx("writing"), e))?;
        f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming to {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
