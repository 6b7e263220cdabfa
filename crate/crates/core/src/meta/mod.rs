//! MAML over the trainable parameter set: an inner loop that adapts Φ on a
//! task's support batch and an outer loop that updates the starting Φ from
//! the adapted query losses.
//!
//! In second-order mode the inner updates are recorded in the same graph as
//! the query loss, so the outer gradient flows through them.

mod hyper;
mod learner;
mod maml;
mod optim;
mod train;

pub use hyper::{OptimizerKind, OrderMode, TrainHyper};
pub use learner::SeqLearner;
pub use maml::{
    adapted_query_loss, inner_adapt, inner_adapt_graph, loss_and_grad, meta_gradient, meta_step, Episode, Learner,
    MetaGradient, StepStats, VarMap,
};
pub use optim::{clip_global_norm, global_norm, OptimizerState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use train::{history_csv, meta_train, meta_train_scored, plain_train, HistoryRow, MetaTrainOutput, HISTORY_HEADER};
