//! The encoder-decoder backbone, adapters, loss and parameter accounting.

mod adapter;
mod config;
mod loss;
mod params;
mod transformer;

pub use adapter::{adapter_apply, AdapterLayer};
pub use config::{AdapterPlacement, ModelConfig, NormStyle};
pub use loss::{nll_loss, nll_loss_graph, Reduction};
pub use params::{build_model, param_counts, param_layout, partition_params, Param, ParamCounts, ParamSet, ParamStore, Partition};
pub use transformer::{decode, encode, forward, Bindings, Memory};

use crate::autodiff::{Graph, Var};
use crate::data::ParaphrasePair;
use crate::error::Result;

/// Teacher-forced NLL of a batch of pairs: the decoder reads `tgt[..m-1]`
/// and predicts `tgt[1..]`.
pub fn pairs_loss(
    g: &mut Graph,
    b: &Bindings,
    cfg: &ModelConfig,
    pairs: &[ParaphrasePair],
    reduction: Reduction,
) -> Result<Var> {
    let srcs: Vec<&[usize]> = pairs.iter().map(|p| p.src.as_slice()).collect();
    let prefixes: Vec<&[usize]> = pairs.iter().map(|p| &p.tgt[..p.tgt.len() - 1]).collect();
    let targets: Vec<usize> = pairs.iter().flat_map(|p| p.tgt[1..].iter().copied()).collect();
    let mem = encode(g, b, cfg, &srcs)?;
    let logits = decode(g, b, cfg, &mem, &prefixes)?;
    nll_loss_graph(g, logits, &targets, reduction)
}
