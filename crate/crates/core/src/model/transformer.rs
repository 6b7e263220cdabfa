//! Encoder-decoder forward pass over a [`Graph`].
//!
//! A batch of sequences is packed row-wise with no padding: linear layers,
//! norms and adapters run on the packed rows, and attention uses a
//! block-diagonal mask so each sequence only sees itself (and, in the
//! decoder, only earlier positions).

use std::collections::HashMap;
use std::sync::Arc;

use super::config::{ModelConfig, NormStyle};
use super::params::{ParamSet, ParamStore};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Array, MASK_VALUE};

/// Parameter name to graph node.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    map: HashMap<String, Var>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.map.insert(name.into(), v);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.map.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }

    /// Binds every stored parameter as a constant.
    pub fn constants(g: &mut Graph, store: &ParamStore) -> Self {
        let mut b = Bindings::new();
        for (name, p) in store.iter() {
            b.insert(name.clone(), g.constant(p.value.clone()));
        }
        b
    }

    /// Binds `store` as constants, except the names in `params`, which become
    /// differentiable leaves holding the given values.
    pub fn with_params(g: &mut Graph, store: &ParamStore, params: &ParamSet) -> Self {
        let mut b = Bindings::new();
        for (name, p) in store.iter() {
            let v = match params.get(name) {
                Some(value) => g.param(name.clone(), value.clone()),
                None => g.constant(p.value.clone()),
            };
            b.insert(name.clone(), v);
        }
        b
    }

    /// Overrides bindings for some names.
    pub fn overlay<'a>(&mut self, vars: impl IntoIterator<Item = (&'a String, &'a Var)>) {
        for (k, v) in vars {
            self.map.insert(k.clone(), *v);
        }
    }
}

/// Row layout of a packed batch.
#[derive(Clone, Debug)]
struct Layout {
    lens: Vec<usize>,
}

impl Layout {
    fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }

    fn blocks(&self) -> Vec<usize> {
        self.lens.iter().enumerate().flat_map(|(i, &l)| std::iter::repeat_n(i, l)).collect()
    }
}

/// `true` marks a blocked (query, key) entry.
fn attention_mask(q: &Layout, k: &Layout, causal: bool) -> Arc<[bool]> {
    let (qb, qp) = (q.blocks(), q.positions());
    let (kb, kp) = (k.blocks(), k.positions());
    let mut mask = Vec::with_capacity(qb.len() * kb.len());
    for i in 0..qb.len() {
        for j in 0..kb.len() {
            mask.push(qb[i] != kb[j] || (causal && kp[j] > qp[i]));
        }
    }
    mask.into()
}

fn check_tokens(cfg: &ModelConfig, seq: &[usize]) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::Empty("token sequence".into()));
    }
    if seq.len() > cfg.max_len {
        return Err(Error::TooLong { len: seq.len(), max: cfg.max_len });
    }
    if let Some(&id) = seq.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange { id, vocab: cfg.vocab_size });
    }
    Ok(())
}

fn linear(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.weight"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, bias)
}

fn norm(g: &mut Graph, b: &Bindings, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = b.get(&format!("{prefix}.gain"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, eps)
}

/// `up(relu(down(z))) + z`.
pub(crate) fn adapter(g: &mut Graph, b: &Bindings, prefix: &str, z: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{prefix}.down"), z)?;
    let h = g.relu(h)?;
    let out = linear(g, b, &format!("{prefix}.up"), h)?;
    g.add(out, z)
}

fn attention(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    mask: &Arc<[bool]>,
) -> Result<Var> {
    let q = linear(g, b, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, b, &format!("{prefix}.k"), kv_in)?;
    let v = linear(g, b, &format!("{prefix}.v"), kv_in)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (qh, kh, vh) = if cfg.n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, (h + 1) * dh)?,
                g.slice(k, 1, h * dh, (h + 1) * dh)?,
                g.slice(v, 1, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let scores = g.mask_fill(scores, mask.clone(), MASK_VALUE)?;
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    linear(g, b, &format!("{prefix}.o"), merged)
}

/// One residual sublayer with an optional adapter on the sublayer output.
fn residual(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    x: Var,
    norm_prefix: &str,
    adapter_prefix: Option<&str>,
    sublayer: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<Var> {
    let input = match cfg.norm_style {
        NormStyle::Pre => norm(g, b, norm_prefix, x, cfg.ln_eps)?,
        NormStyle::Post => x,
    };
    let mut out = sublayer(g, input)?;
    if let Some(p) = adapter_prefix {
        out = adapter(g, b, p, out)?;
    }
    let sum = g.add(x, out)?;
    match cfg.norm_style {
        NormStyle::Pre => Ok(sum),
        NormStyle::Post => norm(g, b, norm_prefix, sum, cfg.ln_eps),
    }
}

fn ffn(g: &mut Graph, b: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, b, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, b, &format!("{prefix}.fc2"), h)
}

fn embed(g: &mut Graph, b: &Bindings, pos_name: &str, seqs: &[&[usize]], layout: &Layout) -> Result<Var> {
    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let tok = g.embed(b.get("embed.tokens")?, &ids)?;
    let pos = g.embed(b.get(pos_name)?, &layout.positions())?;
    g.add(tok, pos)
}

/// Encoder output for packed source sequences.
#[derive(Clone, Debug)]
pub struct Memory {
    pub rows: Var,
    layout: Layout,
}

pub fn encode(g: &mut Graph, b: &Bindings, cfg: &ModelConfig, srcs: &[&[usize]]) -> Result<Memory> {
    for s in srcs {
        check_tokens(cfg, s)?;
    }
    let layout = Layout { lens: srcs.iter().map(|s| s.len()).collect() };
    let mask = attention_mask(&layout, &layout, false);
    let place = cfg.adapter_placement;
    let mut x = embed(g, b, "enc.pos", srcs, &layout)?;
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc.{l}");
        let ad = format!("{p}.adapter_self_attn");
        x = residual(g, b, cfg, x, &format!("{p}.self_attn_norm"), place.enc_self_attn.then_some(ad.as_str()), |g, h| {
            attention(g, b, cfg, &format!("{p}.self_attn"), h, h, &mask)
        })?;
        let ad = format!("{p}.adapter_ffn");
        x = residual(g, b, cfg, x, &format!("{p}.ffn_norm"), place.enc_ffn.then_some(ad.as_str()), |g, h| {
            ffn(g, b, &format!("{p}.ffn"), h)
        })?;
    }
    if cfg.norm_style == NormStyle::Pre {
        x = norm(g, b, "enc.final_norm", x, cfg.ln_eps)?;
    }
    Ok(Memory { rows: x, layout })
}

/// Teacher-forced decoder logits, one row per prefix position, packed in
/// batch order. `prefixes[i]` is decoded against source `i` of `memory`.
pub fn decode(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    memory: &Memory,
    prefixes: &[&[usize]],
) -> Result<Var> {
    if prefixes.len() != memory.layout.lens.len() {
        return Err(Error::LengthMismatch(format!(
            "{} prefixes for {} sources",
            prefixes.len(),
            memory.layout.lens.len()
        )));
    }
    for s in prefixes {
        check_tokens(cfg, s)?;
    }
    let layout = Layout { lens: prefixes.iter().map(|s| s.len()).collect() };
    let self_mask = attention_mask(&layout, &layout, true);
    let cross_mask = attention_mask(&layout, &memory.layout, false);
    let place = cfg.adapter_placement;
    let mut x = embed(g, b, "dec.pos", prefixes, &layout)?;
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec.{l}");
        let ad = format!("{p}.adapter_self_attn");
        x = residual(g, b, cfg, x, &format!("{p}.self_attn_norm"), place.dec_self_attn.then_some(ad.as_str()), |g, h| {
            attention(g, b, cfg, &format!("{p}.self_attn"), h, h, &self_mask)
        })?;
        let ad = format!("{p}.adapter_cross_attn");
        x = residual(g, b, cfg, x, &format!("{p}.cross_attn_norm"), place.dec_cross_attn.then_some(ad.as_str()), |g, h| {
            attention(g, b, cfg, &format!("{p}.cross_attn"), h, memory.rows, &cross_mask)
        })?;
        let ad = format!("{p}.adapter_ffn");
        x = residual(g, b, cfg, x, &format!("{p}.ffn_norm"), place.dec_ffn.then_some(ad.as_str()), |g, h| {
            ffn(g, b, &format!("{p}.ffn"), h)
        })?;
    }
    if cfg.norm_style == NormStyle::Pre {
        x = norm(g, b, "dec.final_norm", x, cfg.ln_eps)?;
    }
    let proj = if cfg.tie_embeddings {
        let e = b.get("embed.tokens")?;
        g.transpose(e)?
    } else {
        b.get("lm_head")?
    };
    g.matmul(x, proj)
}

/// Logits over the vocabulary at every position of `tgt_prefix`.
pub fn forward(params: &ParamStore, cfg: &ModelConfig, src: &[usize], tgt_prefix: &[usize]) -> Result<Array> {
    let mut g = Graph::new();
    let b = Bindings::constants(&mut g, params);
    let mem = encode(&mut g, &b, cfg, &[src])?;
    let logits = decode(&mut g, &b, cfg, &mem, &[tgt_prefix])?;
    Ok(g.value(logits).clone())
}
