use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{apply_primitive, Array, Prim};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Sum over target positions.
    #[default]
    Sum,
    /// Mean over target positions.
    Mean,
}

/// Negative log-likelihood of `targets` under `logits`, summed over rows.
pub fn nll_loss(logits: &Array, targets: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::shape(
            "nll_loss",
            format!("logits {:?} for {} targets", logits.shape(), targets.len()),
        ));
    }
    let per_row = apply_primitive(&Prim::CrossEntropyWithLogits { targets: targets.into() }, &[logits])?;
    Ok(per_row.sum_all())
}

pub fn nll_loss_graph(g: &mut Graph, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
    let per_row = g.cross_entropy(logits, targets)?;
    match reduction {
        Reduction::Sum => g.sum(per_row),
        Reduction::Mean => g.mean(per_row),
    }
}
