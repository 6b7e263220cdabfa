use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which sublayers get an adapter after them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterPlacement {
    pub enc_self_attn: bool,
    pub enc_ffn: bool,
    pub dec_self_attn: bool,
    pub dec_cross_attn: bool,
    pub dec_ffn: bool,
}

impl Default for AdapterPlacement {
    /// After self-attention and after the feed-forward block of every layer,
    /// none after decoder cross-attention.
    fn default() -> Self {
        AdapterPlacement {
            enc_self_attn: true,
            enc_ffn: true,
            dec_self_attn: true,
            dec_cross_attn: false,
            dec_ffn: true,
        }
    }
}

impl AdapterPlacement {
    pub fn none() -> Self {
        AdapterPlacement {
            enc_self_attn: false,
            enc_ffn: false,
            dec_self_attn: false,
            dec_cross_attn: false,
            dec_ffn: false,
        }
    }

    pub fn per_encoder_layer(&self) -> usize {
        self.enc_self_attn as usize + self.enc_ffn as usize
    }

    pub fn per_decoder_layer(&self) -> usize {
        self.dec_self_attn as usize + self.dec_cross_attn as usize + self.dec_ffn as usize
    }

    pub fn any(&self) -> bool {
        self.per_encoder_layer() + self.per_decoder_layer() > 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// `x + sublayer(norm(x))`, with a final norm on each stack.
    #[default]
    Pre,
    /// `norm(x + sublayer(x))`.
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub adapter_hidden: usize,
    #[serde(default)]
    pub adapter_placement: AdapterPlacement,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub norm_style: NormStyle,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// The desk-scale configuration: d_model 64, 2+2 layers, 2 heads,
    /// d_ff 128, adapter width 16.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            vocab_size,
            max_len: 24,
            adapter_hidden: 16,
            adapter_placement: AdapterPlacement::default(),
            tie_embeddings: true,
            norm_style: NormStyle::Pre,
            ln_eps: 1e-5,
        }
    }

    /// BART-large dimensions with 128-wide adapters.
    pub fn bart_large_like() -> Self {
        ModelConfig {
            d_model: 1024,
            n_heads: 16,
            n_enc_layers: 12,
            n_dec_layers: 12,
            d_ff: 4096,
            vocab_size: 50265,
            max_len: 1024,
            adapter_hidden: 128,
            adapter_placement: AdapterPlacement::default(),
            tie_embeddings: true,
            norm_style: NormStyle::Pre,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_placement.any() && self.adapter_hidden == 0 {
            return Err(Error::Config("adapters enabled with adapter_hidden = 0".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }
}
