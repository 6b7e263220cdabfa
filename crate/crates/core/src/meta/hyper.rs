use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    /// Differentiate through the inner updates.
    #[default]
    Second,
    /// Treat adapted parameters as constants of the original ones.
    First,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

/// Step sizes, loop sizes and stopping rules for meta-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    /// Inner step size.
    pub alpha: f64,
    /// Outer step size.
    pub beta: f64,
    /// Inner steps K per task.
    pub inner_steps: usize,
    pub meta_batch_tasks: usize,
    pub task_batch_size: usize,
    pub order_mode: OrderMode,
    pub inner_optimizer: OptimizerKind,
    pub outer_optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Global-norm threshold on the outer gradient; 0 disables clipping.
    pub clip_norm: f64,
    /// Use the whole task batch as both support and query.
    pub shared_support_query: bool,
    pub max_steps: usize,
    /// Validate every this many steps; 0 disables validation.
    pub eval_every: usize,
    pub val_tasks: usize,
    /// Stop after this many validations without improvement; 0 never stops early.
    pub patience: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            alpha: 0.1,
            beta: 1e-3,
            inner_steps: 4,
            meta_batch_tasks: 3,
            task_batch_size: 10,
            order_mode: OrderMode::Second,
            inner_optimizer: OptimizerKind::Sgd,
            outer_optimizer: OptimizerKind::Adamw,
            weight_decay: 0.01,
            clip_norm: 1.0,
            shared_support_query: false,
            max_steps: 200,
            eval_every: 20,
            val_tasks: 6,
            patience: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if self.meta_batch_tasks == 0 || self.task_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.order_mode == OrderMode::Second && self.inner_optimizer == OptimizerKind::Adamw {
            return bad("second-order mode needs the sgd inner optimizer");
        }
        if self.weight_decay < 0.0 || self.clip_norm < 0.0 {
            return bad("weight_decay and clip_norm must be non-negative");
        }
        Ok(())
    }
}
