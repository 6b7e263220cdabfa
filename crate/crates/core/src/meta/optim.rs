use std::collections::BTreeMap;

use super::hyper::OptimizerKind;
use crate::error::{Error, Result};
use crate::model::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Plain SGD or AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            weight_decay,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every entry of `params` that has a gradient.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer", format!("{name}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let updated: Vec<f64> = match self.kind {
                OptimizerKind::Sgd => p.data().iter().zip(g.data()).map(|(x, d)| x - self.lr * d).collect(),
                OptimizerKind::Adamw => {
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let bc1 = 1.0 - self.beta1.powi(t);
                    let bc2 = 1.0 - self.beta2.powi(t);
                    p.data()
                        .iter()
                        .zip(g.data())
                        .enumerate()
                        .map(|(i, (&x, &d))| {
                            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * d;
                            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * d * d;
                            let mhat = m[i] / bc1;
                            let vhat = v[i] / bc2;
                            x - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x)
                        })
                        .collect()
                }
            };
            *p = p.with_data(updated)?;
            if !p.is_finite() {
                return Err(Error::NonFinite(format!("optimizer update of {name}")));
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &ParamSet) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` to global norm `max_norm` when above it. Returns the norm
/// before clipping. `max_norm = 0` disables clipping.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}
