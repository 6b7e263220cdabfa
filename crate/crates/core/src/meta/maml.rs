use std::collections::BTreeMap;

use super::hyper::{OptimizerKind, OrderMode, TrainHyper};
use super::optim::{clip_global_norm, OptimizerState};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Trainable-parameter name to graph node.
pub type VarMap = BTreeMap<String, Var>;

/// A loss that depends on the trainable parameters through `phi`; everything
/// else the learner needs (frozen weights, configuration) it owns.
pub trait Learner {
    type Batch;

    fn loss(&self, g: &mut Graph, phi: &VarMap, batch: &Self::Batch) -> Result<Var>;

    fn batch_is_empty(&self, batch: &Self::Batch) -> bool;
}

/// Support and query batches of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<B> {
    pub support: B,
    pub query: B,
}

fn bind(g: &mut Graph, phi: &ParamSet) -> VarMap {
    phi.iter().map(|(n, v)| (n.clone(), g.param(n.clone(), v.clone()))).collect()
}

/// Loss and gradient at `phi`, evaluated eagerly.
pub fn loss_and_grad<L: Learner>(learner: &L, phi: &ParamSet, batch: &L::Batch) -> Result<(f64, ParamSet)> {
    let mut g = Graph::new();
    let vars = bind(&mut g, phi);
    let loss = learner.loss(&mut g, &vars, batch)?;
    let order: Vec<Var> = vars.values().copied().collect();
    let grads = g.backward(loss, &order)?;
    let value = g.value(loss).data()[0];
    let gm = vars.keys().cloned().zip(grads.iter().map(|&v| g.value(v).clone())).collect();
    Ok((value, gm))
}

/// K inner steps recorded in `g`: each adapted parameter is a node that
/// depends on `phi` through the support gradients. Returns the adapted nodes
/// and the support loss at the starting point.
pub fn inner_adapt_graph<L: Learner>(
    learner: &L,
    g: &mut Graph,
    phi: &VarMap,
    support: &L::Batch,
    hyper: &TrainHyper,
) -> Result<(VarMap, f64)> {
    if learner.batch_is_empty(support) {
        return Err(Error::Empty("support set".into()));
    }
    if hyper.inner_optimizer != OptimizerKind::Sgd {
        return Err(Error::Config("differentiable inner loop supports sgd only".into()));
    }
    let mut cur = phi.clone();
    let mut first = None;
    for _ in 0..hyper.inner_steps {
        let loss = learner.loss(g, &cur, support)?;
        first.get_or_insert(g.value(loss).data()[0]);
        let order: Vec<Var> = cur.values().copied().collect();
        let grads = g.backward(loss, &order)?;
        let mut next = VarMap::new();
        for ((name, &p), gv) in cur.iter().zip(grads) {
            let step = g.scale(gv, hyper.alpha)?;
            next.insert(name.clone(), g.sub(p, step)?);
        }
        cur = next;
    }
    Ok((cur, first.unwrap_or(f64::NAN)))
}

/// K eager inner steps with the configured inner optimizer. Returns the
/// adapted values and the support loss at the starting point.
pub fn inner_adapt<L: Learner>(
    learner: &L,
    phi: &ParamSet,
    support: &L::Batch,
    hyper: &TrainHyper,
) -> Result<(ParamSet, f64)> {
    if learner.batch_is_empty(support) {
        return Err(Error::Empty("support set".into()));
    }
    let mut opt = OptimizerState::new(hyper.inner_optimizer, hyper.alpha, hyper.weight_decay);
    let mut cur = phi.clone();
    let mut first = None;
    for _ in 0..hyper.inner_steps {
        let (loss, grads) = loss_and_grad(learner, &cur, support)?;
        first.get_or_insert(loss);
        opt.apply(&mut cur, &grads)?;
    }
    Ok((cur, first.unwrap_or(f64::NAN)))
}

/// Outer gradient summed over tasks, plus mean support/query losses.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub grads: ParamSet,
    pub support_loss: f64,
    pub query_loss: f64,
}

/// Outer gradient of the post-adaptation query losses with respect to the
/// pre-adaptation `phi`. Tasks are reduced in the given order.
pub fn meta_gradient<L: Learner>(
    learner: &L,
    phi: &ParamSet,
    episodes: &[Episode<L::Batch>],
    hyper: &TrainHyper,
) -> Result<MetaGradient> {
    if episodes.is_empty() {
        return Err(Error::Empty("meta batch".into()));
    }
    let mut total: ParamSet = phi.iter().map(|(n, v)| (n.clone(), v.map(|_| 0.0))).collect();
    let (mut s_sum, mut q_sum) = (0.0, 0.0);
    for ep in episodes {
        if learner.batch_is_empty(&ep.query) {
            return Err(Error::Empty("query set".into()));
        }
        let (task_grads, s_loss, q_loss) = match hyper.order_mode {
            OrderMode::Second => {
                let mut g = Graph::new();
                let leaves = bind(&mut g, phi);
                let (adapted, s_loss) = inner_adapt_graph(learner, &mut g, &leaves, &ep.support, hyper)?;
                let q = learner.loss(&mut g, &adapted, &ep.query)?;
                let order: Vec<Var> = leaves.values().copied().collect();
                let grads = g.backward(q, &order)?;
                let gm: ParamSet = leaves.keys().cloned().zip(grads.iter().map(|&v| g.value(v).clone())).collect();
                (gm, s_loss, g.value(q).data()[0])
            }
            OrderMode::First => {
                let (adapted, s_loss) = inner_adapt(learner, phi, &ep.support, hyper)?;
                let (q_loss, gm) = loss_and_grad(learner, &adapted, &ep.query)?;
                (gm, s_loss, q_loss)
            }
        };
        for (name, gsum) in total.iter_mut() {
            *gsum = gsum.zip_map(&task_grads[name], |a, b| a + b)?;
        }
        s_sum += s_loss;
        q_sum += q_loss;
    }
    let n = episodes.len() as f64;
    Ok(MetaGradient { grads: total, support_loss: s_sum / n, query_loss: q_sum / n })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub support_loss: f64,
    pub query_loss: f64,
    /// Outer gradient norm before clipping.
    pub grad_norm: f64,
}

/// One outer update of `phi` from a meta batch.
pub fn meta_step<L: Learner>(
    learner: &L,
    phi: &mut ParamSet,
    episodes: &[Episode<L::Batch>],
    hyper: &TrainHyper,
    opt: &mut OptimizerState,
) -> Result<StepStats> {
    let mut mg = meta_gradient(learner, phi, episodes, hyper)?;
    let grad_norm = clip_global_norm(&mut mg.grads, hyper.clip_norm);
    opt.apply(phi, &mg.grads)?;
    Ok(StepStats { support_loss: mg.support_loss, query_loss: mg.query_loss, grad_norm })
}

/// Mean query loss after inner adaptation on each episode's support set.
pub fn adapted_query_loss<L: Learner>(
    learner: &L,
    phi: &ParamSet,
    episodes: &[Episode<L::Batch>],
    hyper: &TrainHyper,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Empty("validation episodes".into()));
    }
    let mut sum = 0.0;
    for ep in episodes {
        let (adapted, _) = inner_adapt(learner, phi, &ep.support, hyper)?;
        let mut g = Graph::new();
        let vars = bind(&mut g, &adapted);
        let q = learner.loss(&mut g, &vars, &ep.query)?;
        sum += g.value(q).data()[0];
    }
    Ok(sum / episodes.len() as f64)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tensor::Array;

    /// L(phi) = 0.5 * (phi - c)^2 on a scalar parameter named "phi".
    pub(crate) struct Surrogate;

    impl Learner for Surrogate {
        type Batch = Option<f64>;

        fn loss(&self, g: &mut Graph, phi: &VarMap, c: &Option<f64>) -> Result<Var> {
            let c = g.constant(Array::scalar(c.unwrap()));
            let d = g.sub(phi["phi"], c)?;
            let sq = g.mul(d, d)?;
            g.scale(sq, 0.5)
        }

        fn batch_is_empty(&self, c: &Option<f64>) -> bool {
            c.is_none()
        }
    }

    fn read(g: &Graph, vars: &VarMap) -> ParamSet {
        vars.iter().map(|(n, &v)| (n.clone(), g.value(v).clone())).collect()
    }

    pub(crate) fn scalar(v: f64) -> ParamSet {
        [("phi".to_string(), Array::scalar(v))].into_iter().collect()
    }

    fn hyper(alpha: f64, k: usize, order: OrderMode) -> TrainHyper {
        TrainHyper { alpha, inner_steps: k, order_mode: order, ..Default::default() }
    }

    #[test]
    fn one_inner_step_is_gradient_descent() {
        let (phi, c, a) = (1.3, -0.4, 0.25);
        let (out, loss) = inner_adapt(&Surrogate, &scalar(phi), &Some(c), &hyper(a, 1, OrderMode::Second)).unwrap();
        assert_eq!(out["phi"].data()[0], phi - a * (phi - c));
        assert_eq!(loss, 0.5 * (phi - c) * (phi - c));
    }

    #[test]
    fn four_inner_steps_iterate_the_one_step_map() {
        let (phi, c, a) = (1.3, -0.4, 0.25);
        let (out, _) = inner_adapt(&Surrogate, &scalar(phi), &Some(c), &hyper(a, 4, OrderMode::Second)).unwrap();
        let mut x = phi;
        for _ in 0..4 {
            x -= a * (x - c);
        }
        assert!((out["phi"].data()[0] - x).abs() < 1e-15);
        assert!((x - (c + (1.0 - a).powi(4) * (phi - c))).abs() < 1e-15);
    }

    #[test]
    fn graph_and_eager_inner_loops_agree() {
        let h = hyper(0.3, 3, OrderMode::Second);
        let (eager, _) = inner_adapt(&Surrogate, &scalar(0.8), &Some(2.0), &h).unwrap();
        let mut g = Graph::new();
        let leaves = bind(&mut g, &scalar(0.8));
        let (nodes, _) = inner_adapt_graph(&Surrogate, &mut g, &leaves, &Some(2.0), &h).unwrap();
        assert!(read(&g, &nodes)["phi"].bit_eq(&eager["phi"]));
    }

    #[test]
    fn surrogate_outer_gradients() {
        let (phi, a, b, alpha) = (0.9, 0.2, -1.1, 0.3);
        let ep = [Episode { support: Some(a), query: Some(b) }];
        let hat = phi - alpha * (phi - a);
        let second = meta_gradient(&Surrogate, &scalar(phi), &ep, &hyper(alpha, 1, OrderMode::Second)).unwrap();
        assert!((second.grads["phi"].data()[0] - (1.0 - alpha) * (hat - b)).abs() < 1e-12);
        let first = meta_gradient(&Surrogate, &scalar(phi), &ep, &hyper(alpha, 1, OrderMode::First)).unwrap();
        assert!((first.grads["phi"].data()[0] - (hat - b)).abs() < 1e-12);
    }

    #[test]
    fn orders_converge_linearly_as_alpha_shrinks() {
        let ep = [Episode { support: Some(0.5), query: Some(-1.0) }];
        let gap = |alpha: f64| {
            let s = meta_gradient(&Surrogate, &scalar(2.0), &ep, &hyper(alpha, 1, OrderMode::Second)).unwrap();
            let f = meta_gradient(&Surrogate, &scalar(2.0), &ep, &hyper(alpha, 1, OrderMode::First)).unwrap();
            (s.grads["phi"].data()[0] - f.grads["phi"].data()[0]).abs()
        };
        let (g1, g2) = (gap(1e-2), gap(1e-3));
        assert!(g2 < g1);
        assert!((g1 / g2 - 10.0).abs() < 0.2, "{g1} {g2}");
    }

    #[test]
    fn constant_loss_leaves_phi_fixed() {
        struct Flat;
        impl Learner for Flat {
            type Batch = ();
            fn loss(&self, g: &mut Graph, phi: &VarMap, _: &()) -> Result<Var> {
                let z = g.scale(phi["phi"], 0.0)?;
                g.add_scalar(z, 3.0)
            }
            fn batch_is_empty(&self, _: &()) -> bool {
                false
            }
        }
        let (out, _) = inner_adapt(&Flat, &scalar(0.7), &(), &hyper(0.5, 4, OrderMode::Second)).unwrap();
        assert_eq!(out["phi"].data()[0], 0.7);
    }

    #[test]
    fn empty_query_is_an_error() {
        let ep = [Episode { support: Some(0.0), query: None }];
        let err = meta_gradient(&Surrogate, &scalar(0.0), &ep, &hyper(0.1, 1, OrderMode::Second)).unwrap_err();
        assert!(matches!(err, Error::Empty(_)));
    }

    #[test]
    fn tasks_are_summed() {
        let h = hyper(0.1, 1, OrderMode::Second);
        let e1 = Episode { support: Some(0.0), query: Some(1.0) };
        let e2 = Episode { support: Some(2.0), query: Some(-1.0) };
        let a = meta_gradient(&Surrogate, &scalar(0.5), &[e1.clone()], &h).unwrap().grads["phi"].data()[0];
        let b = meta_gradient(&Surrogate, &scalar(0.5), &[e2.clone()], &h).unwrap().grads["phi"].data()[0];
        let both = meta_gradient(&Surrogate, &scalar(0.5), &[e1, e2], &h).unwrap().grads["phi"].data()[0];
        assert!((both - (a + b)).abs() < 1e-15);
    }
}
