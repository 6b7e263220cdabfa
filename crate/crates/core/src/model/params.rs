//! Named parameters, their partition into frozen backbone and trainable
//! adapter/normalization sets, and parameter accounting.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Backbone,
    Adapter,
    Norm,
}

impl Partition {
    pub fn tag_byte(self) -> u8 {
        match self {
            Partition::Backbone => 0,
            Partition::Adapter => 1,
            Partition::Norm => 2,
        }
    }

    pub fn from_tag_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Partition::Backbone),
            1 => Some(Partition::Adapter),
            2 => Some(Partition::Norm),
            _ => None,
        }
    }

    /// Adapters and normalization layers make up the trainable set.
    pub fn is_trainable(self) -> bool {
        !matches!(self, Partition::Backbone)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array,
    pub tag: Option<Partition>,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Trainable values keyed by parameter name.
pub type ParamSet = BTreeMap<String, Array>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array, tag: Partition) {
        self.params.insert(name.into(), Param { value, tag: Some(tag) });
    }

    pub fn insert_untagged(&mut self, name: impl Into<String>, value: Array) {
        self.params.insert(name.into(), Param { value, tag: None });
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn tag(&self, name: &str) -> Option<Partition> {
        self.params.get(name).and_then(|p| p.tag)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set(&mut self, name: &str, value: Array) -> Result<()> {
        let p = self.params.get_mut(name).ok_or_else(|| Error::MissingParam(name.into()))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Replaces every value present in `values`.
    pub fn update(&mut self, values: &ParamSet) -> Result<()> {
        for (name, v) in values {
            self.set(name, v.clone())?;
        }
        Ok(())
    }

    /// Snapshot of the named values.
    pub fn subset(&self, names: &[String]) -> Result<ParamSet> {
        names
            .iter()
            .map(|n| {
                self.get(n).cloned().map(|v| (n.clone(), v)).ok_or_else(|| Error::MissingParam(n.clone()))
            })
            .collect()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Same parameters with every value rounded through binary32.
    pub fn rounded_to_f32(&self) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param { value: p.value.round_to_f32(), tag: p.tag }))
                .collect(),
        }
    }

    /// True when every parameter with the given tag is bitwise equal in both.
    pub fn partition_bit_eq(&self, other: &ParamStore, tag: Partition) -> bool {
        let mine: Vec<_> = self.params.iter().filter(|(_, p)| p.tag == Some(tag)).collect();
        let theirs: Vec<_> = other.params.iter().filter(|(_, p)| p.tag == Some(tag)).collect();
        mine.len() == theirs.len()
            && mine.iter().zip(&theirs).all(|((na, a), (nb, b))| na == nb && a.value.bit_eq(&b.value))
    }
}

/// Splits parameter names into (theta, phi): the frozen backbone and the
/// trainable adapter + normalization set.
pub fn partition_params(store: &ParamStore) -> Result<(Vec<String>, Vec<String>)> {
    let mut theta = Vec::new();
    let mut phi = Vec::new();
    for (name, p) in store.iter() {
        match p.tag {
            None => return Err(Error::Untagged(name.clone())),
            Some(t) if t.is_trainable() => phi.push(name.clone()),
            Some(_) => theta.push(name.clone()),
        }
    }
    Ok((theta, phi))
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// Uniform in ±1/sqrt(fan_in).
    Uniform { fan_in: usize },
    /// Normal with standard deviation 1/sqrt(d_model).
    Embedding,
    Zeros,
    Ones,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    tag: Partition,
    init: Init,
}

fn push_linear(specs: &mut Vec<Spec>, prefix: &str, fan_in: usize, fan_out: usize, tag: Partition, zero: bool) {
    specs.push(Spec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        tag,
        init: if zero { Init::Zeros } else { Init::Uniform { fan_in } },
    });
    specs.push(Spec { name: format!("{prefix}.bias"), shape: vec![fan_out], tag, init: Init::Zeros });
}

fn push_norm(specs: &mut Vec<Spec>, prefix: &str, d: usize) {
    specs.push(Spec { name: format!("{prefix}.gain"), shape: vec![d], tag: Partition::Norm, init: Init::Ones });
    specs.push(Spec { name: format!("{prefix}.bias"), shape: vec![d], tag: Partition::Norm, init: Init::Zeros });
}

fn push_attention(specs: &mut Vec<Spec>, prefix: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        push_linear(specs, &format!("{prefix}.{proj}"), d, d, Partition::Backbone, false);
    }
}

fn push_adapter(specs: &mut Vec<Spec>, prefix: &str, d: usize, h: usize) {
    // Down-projection has a fan-in of d_model: uniform(±1/sqrt(d_model)).
    push_linear(specs, &format!("{prefix}.down"), d, h, Partition::Adapter, false);
    // Zero up-projection makes the freshly inserted adapter an exact identity.
    push_linear(specs, &format!("{prefix}.up"), h, d, Partition::Adapter, true);
}

fn param_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let (d, f, h) = (cfg.d_model, cfg.d_ff, cfg.adapter_hidden);
    let place = cfg.adapter_placement;
    let mut s = Vec::new();
    s.push(Spec { name: "embed.tokens".into(), shape: vec![cfg.vocab_size, d], tag: Partition::Backbone, init: Init::Embedding });
    s.push(Spec { name: "enc.pos".into(), shape: vec![cfg.max_len, d], tag: Partition::Backbone, init: Init::Embedding });
    s.push(Spec { name: "dec.pos".into(), shape: vec![cfg.max_len, d], tag: Partition::Backbone, init: Init::Embedding });
    if !cfg.tie_embeddings {
        s.push(Spec { name: "lm_head".into(), shape: vec![d, cfg.vocab_size], tag: Partition::Backbone, init: Init::Uniform { fan_in: d } });
    }
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        push_attention(&mut s, &format!("{p}.self_attn"), d);
        push_norm(&mut s, &format!("{p}.self_attn_norm"), d);
        push_linear(&mut s, &format!("{p}.ffn.fc1"), d, f, Partition::Backbone, false);
        push_linear(&mut s, &format!("{p}.ffn.fc2"), f, d, Partition::Backbone, false);
        push_norm(&mut s, &format!("{p}.ffn_norm"), d);
        if place.enc_self_attn {
            push_adapter(&mut s, &format!("{p}.adapter_self_attn"), d, h);
        }
        if place.enc_ffn {
            push_adapter(&mut s, &format!("{p}.adapter_ffn"), d, h);
        }
    }
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec.{l}");
        push_attention(&mut s, &format!("{p}.self_attn"), d);
        push_norm(&mut s, &format!("{p}.self_attn_norm"), d);
        push_attention(&mut s, &format!("{p}.cross_attn"), d);
        push_norm(&mut s, &format!("{p}.cross_attn_norm"), d);
        push_linear(&mut s, &format!("{p}.ffn.fc1"), d, f, Partition::Backbone, false);
        push_linear(&mut s, &format!("{p}.ffn.fc2"), f, d, Partition::Backbone, false);
        push_norm(&mut s, &format!("{p}.ffn_norm"), d);
        if place.dec_self_attn {
            push_adapter(&mut s, &format!("{p}.adapter_self_attn"), d, h);
        }
        if place.dec_cross_attn {
            push_adapter(&mut s, &format!("{p}.adapter_cross_attn"), d, h);
        }
        if place.dec_ffn {
            push_adapter(&mut s, &format!("{p}.adapter_ffn"), d, h);
        }
    }
    push_norm(&mut s, "enc.final_norm", d);
    push_norm(&mut s, "dec.final_norm", d);
    s.sort_by(|a, b| a.name.cmp(&b.name));
    s
}

/// Name, shape and partition of every parameter of `cfg`, sorted by name.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Partition)> {
    param_specs(cfg).into_iter().map(|s| (s.name, s.shape, s.tag)).collect()
}

/// Builds a freshly initialized model. Deterministic in `(config, seed)`.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emb = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut store = ParamStore::new();
    for spec in param_specs(cfg) {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Embedding => (0..n).map(|_| emb.sample(&mut rng)).collect(),
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        store.insert(spec.name, Array::new(spec.shape, data)?, spec.tag);
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
}

impl ParamCounts {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Closed-form parameter counts for a configuration.
pub fn param_counts(cfg: &ModelConfig) -> ParamCounts {
    let (d, f, h, v) = (cfg.d_model, cfg.d_ff, cfg.adapter_hidden, cfg.vocab_size);
    let attn = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let norm = 2 * d;
    let adapter = d * h + h + h * d + d;
    let enc_adapters = cfg.adapter_placement.per_encoder_layer() * cfg.n_enc_layers;
    let dec_adapters = cfg.adapter_placement.per_decoder_layer() * cfg.n_dec_layers;
    let n_norms = 2 * cfg.n_enc_layers + 3 * cfg.n_dec_layers + 2;

    let embeddings = v * d + 2 * cfg.max_len * d + if cfg.tie_embeddings { 0 } else { d * v };
    let backbone = embeddings
        + cfg.n_enc_layers * (attn + ffn)
        + cfg.n_dec_layers * (2 * attn + ffn);
    let trainable = (enc_adapters + dec_adapters) * adapter + n_norms * norm;
    ParamCounts { total: backbone + trainable, trainable }
}
