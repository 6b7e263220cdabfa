//! Central finite-difference checks of [`Graph::backward`].

use std::collections::HashMap;

use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so gradients that are
/// numerically zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct LeafCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward() against central differences for every element of
/// every leaf in `wrt`. The graph is re-evaluated by replay, so `output` may
/// itself be built from gradient nodes.
pub fn grad_check(
    graph: &mut Graph,
    output: Var,
    wrt: &[Var],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let grads = graph.backward(output, wrt)?;
    let mut leaves = Vec::with_capacity(wrt.len());
    for (&leaf, &gvar) in wrt.iter().zip(&grads) {
        let base = graph.value(leaf).clone();
        let analytic = graph.value(gvar).clone();
        let mut max_err: f64 = 0.0;
        let mut overrides = HashMap::new();
        for i in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[i] += step;
            overrides.insert(leaf, base.with_data(plus)?);
            let fp = graph.replay(output, &overrides)?.data()[0];
            let mut minus = base.data().to_vec();
            minus[i] -= step;
            overrides.insert(leaf, base.with_data(minus)?);
            let fm = graph.replay(output, &overrides)?.data()[0];
            let numeric = (fp - fm) / (2.0 * step);
            max_err = max_err.max(rel_error(analytic.data()[i], numeric));
        }
        leaves.push(LeafCheck {
            name: graph.leaf_name(leaf).unwrap_or("<node>").to_string(),
            max_rel_error: max_err,
            checked: base.len(),
        });
    }
    Ok(GradCheckReport { leaves, tolerance })
}
