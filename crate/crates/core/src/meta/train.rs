use std::fmt::Write as _;
use std::time::Instant;

use super::hyper::TrainHyper;
use super::maml::{adapted_query_loss, loss_and_grad, meta_step, Episode, Learner, StepStats};
use super::optim::{clip_global_norm, OptimizerState};
use crate::error::{Error, Result};
use crate::model::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub support_loss: f64,
    pub query_loss: f64,
    pub val_loss: Option<f64>,
    pub grad_norm: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutput {
    /// Φ with the lowest validation loss (the final Φ without validation).
    pub phi: ParamSet,
    pub history: Vec<HistoryRow>,
    /// Validation loss of the starting Φ.
    pub initial_val: Option<f64>,
    pub best_val: Option<f64>,
    pub best_step: usize,
    pub steps_run: usize,
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Divergence { step, detail },
        other => other,
    }
}

/// Shared loop: `step` performs one update of Φ; `score` (lower is better)
/// selects the returned Φ and runs every `hyper.eval_every` steps and after
/// the last one.
fn train_loop<F>(
    phi: ParamSet,
    hyper: &TrainHyper,
    mut step_fn: F,
    mut score: Option<&mut dyn FnMut(&ParamSet) -> Result<f64>>,
) -> Result<MetaTrainOutput>
where
    F: FnMut(usize, &mut ParamSet, &mut OptimizerState) -> Result<StepStats>,
{
    hyper.validate()?;
    let start = Instant::now();
    let validate = hyper.eval_every > 0 && score.is_some();
    let mut eval = |phi: &ParamSet, step: usize| -> Result<f64> {
        let f = score.as_mut().expect("validation enabled");
        let v = f(phi).map_err(|e| divergence(step, e))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Divergence { step, detail: format!("validation loss {v}") })
        }
    };
    let initial_val = if validate { Some(eval(&phi, 0)?) } else { None };
    let mut opt = OptimizerState::new(hyper.outer_optimizer, hyper.beta, hyper.weight_decay);
    let mut out = MetaTrainOutput {
        phi: phi.clone(),
        history: Vec::new(),
        initial_val,
        best_val: initial_val,
        best_step: 0,
        steps_run: 0,
    };
    let mut cur = phi;
    let mut stale = 0;
    for step in 1..=hyper.max_steps {
        let stats = step_fn(step, &mut cur, &mut opt).map_err(|e| divergence(step, e))?;
        if !(stats.support_loss.is_finite() && stats.query_loss.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("query loss {}", stats.query_loss) });
        }
        let val_loss = if validate && (step % hyper.eval_every == 0 || step == hyper.max_steps) {
            Some(eval(&cur, step)?)
        } else {
            None
        };
        out.history.push(HistoryRow {
            step,
            support_loss: stats.support_loss,
            query_loss: stats.query_loss,
            val_loss,
            grad_norm: stats.grad_norm,
            wall_time: start.elapsed().as_secs_f64(),
        });
        out.steps_run = step;
        if let Some(v) = val_loss {
            if out.best_val.is_none_or(|b| v < b) {
                out.best_val = Some(v);
                out.best_step = step;
                out.phi = cur.clone();
                stale = 0;
            } else {
                stale += 1;
                if hyper.patience > 0 && stale >= hyper.patience {
                    break;
                }
            }
        }
    }
    if !validate {
        out.phi = cur;
        out.best_step = out.steps_run;
    }
    Ok(out)
}

/// Runs up to `hyper.max_steps` meta steps. `sample(step)` supplies each
/// meta batch; Φ is selected by the adapted query loss on `val`.
pub fn meta_train<L, S>(
    learner: &L,
    phi: ParamSet,
    sample: S,
    val: &[Episode<L::Batch>],
    hyper: &TrainHyper,
) -> Result<MetaTrainOutput>
where
    L: Learner,
    S: FnMut(usize) -> Result<Vec<Episode<L::Batch>>>,
{
    let mut score = |phi: &ParamSet| adapted_query_loss(learner, phi, val, hyper);
    let score: Option<&mut dyn FnMut(&ParamSet) -> Result<f64>> = if val.is_empty() { None } else { Some(&mut score) };
    meta_train_scored(learner, phi, sample, score, hyper)
}

/// [`meta_train`] with a caller-supplied selection score.
pub fn meta_train_scored<L, S>(
    learner: &L,
    phi: ParamSet,
    mut sample: S,
    score: Option<&mut dyn FnMut(&ParamSet) -> Result<f64>>,
    hyper: &TrainHyper,
) -> Result<MetaTrainOutput>
where
    L: Learner,
    S: FnMut(usize) -> Result<Vec<Episode<L::Batch>>>,
{
    train_loop(
        phi,
        hyper,
        |step, cur, opt| {
            let episodes = sample(step)?;
            meta_step(learner, cur, &episodes, hyper, opt)
        },
        score,
    )
}

/// Ordinary minibatch training of Φ with the outer optimizer: `sample(step)`
/// supplies each batch; support and query losses both report the batch loss.
pub fn plain_train<L, S>(
    learner: &L,
    phi: ParamSet,
    mut sample: S,
    score: Option<&mut dyn FnMut(&ParamSet) -> Result<f64>>,
    hyper: &TrainHyper,
) -> Result<MetaTrainOutput>
where
    L: Learner,
    S: FnMut(usize) -> Result<L::Batch>,
{
    train_loop(
        phi,
        hyper,
        |step, cur, opt| {
            let batch = sample(step)?;
            if learner.batch_is_empty(&batch) {
                return Err(Error::Empty("training batch".into()));
            }
            let (loss, mut grads) = loss_and_grad(learner, cur, &batch)?;
            let grad_norm = clip_global_norm(&mut grads, hyper.clip_norm);
            opt.apply(cur, &grads)?;
            Ok(StepStats { support_loss: loss, query_loss: loss, grad_norm })
        },
        score,
    )
}

pub const HISTORY_HEADER: &str = "step,support_loss,query_loss,val_loss,grad_norm,wall_time";

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{:.3}", r.step, r.support_loss, r.query_loss, val, r.grad_norm, r.wall_time);
    }
    s
}
