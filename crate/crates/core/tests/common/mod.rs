//! Shared fixtures for the integration tests and the acceptance report.
#![allow(dead_code)]

use std::sync::Arc;

use lapa_core::gradcheck::{grad_check, rel_error, GradCheckReport};
use lapa_core::meta::{
    adapted_query_loss, meta_gradient, Episode, Learner, OrderMode, SeqLearner, TrainHyper, VarMap,
};
use lapa_core::model::{partition_params, ParamStore};
use lapa_core::model::{build_model, pairs_loss, AdapterPlacement, Bindings, ModelConfig, NormStyle, ParamSet, Reduction};
use lapa_core::data::ParaphrasePair;
use lapa_core::{Array, Graph, Prim, PrimId, Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n: usize = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-2, 2]` kept at least 0.1 away from zero, so kinks stay
/// outside the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Reduces `y` to a scalar with fixed random weights, so every output
/// element contributes a distinct cotangent.
fn weighted_sum(g: &mut Graph, rng: &mut ChaCha8Rng, y: Var) -> Var {
    let w = random(rng, g.shape(y), -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

/// Builds `prim` on random inputs and returns `(graph, output, leaves)`.
fn primitive_case(id: PrimId, rng: &mut ChaCha8Rng) -> (Graph, Var, Vec<Var>) {
    let mut g = Graph::new();
    let (y, leaves) = match id {
        PrimId::MatMul => {
            let a = g.param("a", random(rng, &[3, 4], -1.0, 1.0));
            let b = g.param("b", random(rng, &[4, 5], -1.0, 1.0));
            (g.apply(Prim::MatMul, &[a, b]).unwrap(), vec![a, b])
        }
        PrimId::Add | PrimId::Mul => {
            let a = g.param("a", random(rng, &[3, 4], -1.0, 1.0));
            let b = g.param("b", random(rng, &[1, 4], -1.0, 1.0));
            let prim = if id == PrimId::Add { Prim::Add } else { Prim::Mul };
            (g.apply(prim, &[a, b]).unwrap(), vec![a, b])
        }
        PrimId::Scale => {
            let a = g.param("a", random(rng, &[2, 3], -1.0, 1.0));
            (g.apply(Prim::Scale(-1.7), &[a]).unwrap(), vec![a])
        }
        PrimId::AddScalar => {
            let a = g.param("a", random(rng, &[2, 3], -1.0, 1.0));
            (g.apply(Prim::AddScalar(0.4), &[a]).unwrap(), vec![a])
        }
        PrimId::Relu | PrimId::Step | PrimId::Gelu | PrimId::Tanh => {
            let a = g.param("a", away_from_zero(rng, &[3, 4]));
            let prim = match id {
                PrimId::Relu => Prim::Relu,
                PrimId::Step => Prim::Step,
                PrimId::Gelu => Prim::Gelu,
                _ => Prim::Tanh,
            };
            (g.apply(prim, &[a]).unwrap(), vec![a])
        }
        PrimId::Rsqrt => {
            let a = g.param("a", random(rng, &[3, 4], 0.3, 2.0));
            (g.apply(Prim::Rsqrt, &[a]).unwrap(), vec![a])
        }
        PrimId::SoftmaxLastDim => {
            let a = g.param("a", random(rng, &[3, 5], -2.0, 2.0));
            (g.apply(Prim::SoftmaxLastDim, &[a]).unwrap(), vec![a])
        }
        PrimId::LayerNorm => {
            let x = g.param("x", random(rng, &[3, 6], -2.0, 2.0));
            let gain = g.param("gain", random(rng, &[6], 0.5, 1.5));
            let bias = g.param("bias", random(rng, &[6], -0.5, 0.5));
            (g.apply(Prim::LayerNorm { eps: 1e-5 }, &[x, gain, bias]).unwrap(), vec![x, gain, bias])
        }
        PrimId::EmbedLookup => {
            let t = g.param("table", random(rng, &[6, 4], -1.0, 1.0));
            let ids: Arc<[usize]> = vec![2, 0, 2, 5].into();
            (g.apply(Prim::EmbedLookup { ids }, &[t]).unwrap(), vec![t])
        }
        PrimId::Concat => {
            let a = g.param("a", random(rng, &[2, 3], -1.0, 1.0));
            let b = g.param("b", random(rng, &[2, 2], -1.0, 1.0));
            (g.apply(Prim::Concat { axis: 1 }, &[a, b]).unwrap(), vec![a, b])
        }
        PrimId::Slice => {
            let a = g.param("a", random(rng, &[4, 5], -1.0, 1.0));
            (g.apply(Prim::Slice { axis: 1, start: 1, end: 4 }, &[a]).unwrap(), vec![a])
        }
        PrimId::PadSlice => {
            let a = g.param("a", random(rng, &[4, 2], -1.0, 1.0));
            (g.apply(Prim::PadSlice { axis: 1, start: 2, full: 5 }, &[a]).unwrap(), vec![a])
        }
        PrimId::Reshape => {
            let a = g.param("a", random(rng, &[2, 6], -1.0, 1.0));
            (g.apply(Prim::Reshape { shape: vec![3, 4] }, &[a]).unwrap(), vec![a])
        }
        PrimId::TransposeLast2 => {
            let a = g.param("a", random(rng, &[2, 3, 4], -1.0, 1.0));
            (g.apply(Prim::TransposeLast2, &[a]).unwrap(), vec![a])
        }
        PrimId::CrossEntropyWithLogits => {
            let a = g.param("logits", random(rng, &[4, 6], -2.0, 2.0));
            let targets: Arc<[usize]> = vec![1, 5, 0, 3].into();
            (g.apply(Prim::CrossEntropyWithLogits { targets }, &[a]).unwrap(), vec![a])
        }
        PrimId::MaskFill => {
            let a = g.param("a", random(rng, &[3, 3], -1.0, 1.0));
            let mask: Arc<[bool]> = (0..9).map(|i| i % 4 == 1).collect::<Vec<_>>().into();
            (g.apply(Prim::MaskFill { mask, value: -3.0 }, &[a]).unwrap(), vec![a])
        }
        PrimId::Mean | PrimId::Sum => {
            let a = g.param("a", random(rng, &[3, 4], -1.0, 1.0));
            let prim = if id == PrimId::Mean { Prim::Mean } else { Prim::Sum };
            (g.apply(prim, &[a]).unwrap(), vec![a])
        }
        PrimId::SumTo => {
            let a = g.param("a", random(rng, &[3, 4], -1.0, 1.0));
            (g.apply(Prim::SumTo { shape: vec![1, 4] }, &[a]).unwrap(), vec![a])
        }
        PrimId::BroadcastTo => {
            let a = g.param("a", random(rng, &[1, 4], -1.0, 1.0));
            (g.apply(Prim::BroadcastTo { shape: vec![3, 4] }, &[a]).unwrap(), vec![a])
        }
        PrimId::ScatterRows => {
            let a = g.param("a", random(rng, &[4, 3], -1.0, 1.0));
            let ids: Arc<[usize]> = vec![1, 4, 1, 0].into();
            (g.apply(Prim::ScatterRows { ids, rows: 5 }, &[a]).unwrap(), vec![a])
        }
    };
    let out = weighted_sum(&mut g, rng, y);
    (g, out, leaves)
}

/// First-order check of every primitive on random inputs.
pub fn primitive_reports(seed: u64) -> Vec<(PrimId, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PrimId::ALL
        .iter()
        .map(|&id| {
            let (mut g, out, leaves) = primitive_case(id, &mut rng);
            (id, grad_check(&mut g, out, &leaves, FD_STEP, FD_TOL).unwrap())
        })
        .collect()
}

/// Checks the gradient of a weighted sum of the first gradient, which runs
/// through the recorded VJP nodes. Only for primitives that are smooth at the
/// sampled inputs with a nonzero second derivative somewhere.
pub fn second_order_reports(seed: u64) -> Vec<(PrimId, GradCheckReport)> {
    let smooth = [
        PrimId::MatMul,
        PrimId::Mul,
        PrimId::Gelu,
        PrimId::Tanh,
        PrimId::Rsqrt,
        PrimId::SoftmaxLastDim,
        PrimId::LayerNorm,
        PrimId::CrossEntropyWithLogits,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    smooth
        .iter()
        .map(|&id| {
            let (mut g, out, leaves) = primitive_case(id, &mut rng);
            let grads = g.backward(out, &leaves).unwrap();
            let mut total = None;
            for gv in grads {
                let s = weighted_sum(&mut g, &mut rng, gv);
                total = Some(match total {
                    None => s,
                    Some(t) => g.add(t, s).unwrap(),
                });
            }
            let total = total.unwrap();
            (id, grad_check(&mut g, total, &leaves, FD_STEP, FD_TOL).unwrap())
        })
        .collect()
}

/// One encoder layer and one decoder layer with adapters everywhere.
pub fn one_layer_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 12,
        vocab_size: 11,
        max_len: 8,
        adapter_hidden: 3,
        adapter_placement: AdapterPlacement {
            enc_self_attn: true,
            enc_ffn: true,
            dec_self_attn: true,
            dec_cross_attn: true,
            dec_ffn: true,
        },
        tie_embeddings: true,
        norm_style: NormStyle::Pre,
        ln_eps: 1e-5,
    }
}

/// Full teacher-forced loss of a packed two-pair batch, checked with respect
/// to every parameter. Parameters are perturbed away from their
/// initialization so zero-initialized adapter weights do not hide any path.
pub fn transformer_report(seed: u64, norm_style: NormStyle) -> GradCheckReport {
    let cfg = ModelConfig { norm_style, ..one_layer_config() };
    let mut store = build_model(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let all: ParamSet = store
        .iter()
        .map(|(name, p)| {
            let noise = random(&mut rng, p.value.shape(), -0.3, 0.3);
            (name.clone(), p.value.zip_map(&noise, |a, b| a + b).unwrap())
        })
        .collect();
    store.update(&all).unwrap();
    let pairs = vec![
        ParaphrasePair { src: vec![0, 5, 6, 7, 1], tgt: vec![0, 7, 8, 1] },
        ParaphrasePair { src: vec![0, 9, 1], tgt: vec![0, 10, 5, 6, 1] },
    ];
    let mut g = Graph::new();
    let b = Bindings::with_params(&mut g, &store, &all);
    let loss = pairs_loss(&mut g, &b, &cfg, &pairs, Reduction::Mean).unwrap();
    let leaves: Vec<Var> = all.keys().map(|k| b.get(k).unwrap()).collect();
    grad_check(&mut g, loss, &leaves, FD_STEP, FD_TOL).unwrap()
}

/// `0.5 * (phi - c)^2` on a scalar named "phi"; the batch is `c`.
pub struct Quadratic;

impl Learner for Quadratic {
    type Batch = f64;

    fn loss(&self, g: &mut Graph, phi: &VarMap, c: &f64) -> Result<Var> {
        let c = g.constant(Array::scalar(*c));
        let d = g.sub(phi["phi"], c)?;
        let sq = g.mul(d, d)?;
        g.scale(sq, 0.5)
    }

    fn batch_is_empty(&self, _: &f64) -> bool {
        false
    }
}

pub fn scalar_phi(v: f64) -> ParamSet {
    [("phi".to_string(), Array::scalar(v))].into_iter().collect()
}

/// Worst absolute gap between the surrogate's outer gradient and the closed
/// forms: one inner step with support centre `a` moves phi to
/// `phi_hat = phi - alpha (phi - a)`, so the exact outer gradient of
/// `0.5 (phi_hat - b)^2` is `(1 - alpha)(phi_hat - b)` and the first-order
/// one drops the `1 - alpha` factor.
pub fn surrogate_gaps() -> (f64, f64) {
    let (mut second, mut first) = (0.0f64, 0.0f64);
    for &(phi, a, b, alpha) in &[(1.3, -0.4, 0.7, 0.1), (-2.0, 0.5, 3.0, 0.25), (0.2, 0.2, -1.0, 0.9)] {
        let eps = [Episode { support: a, query: b }];
        let phi_hat = phi - alpha * (phi - a);
        for (order, expect, gap) in [
            (OrderMode::Second, (1.0 - alpha) * (phi_hat - b), &mut second),
            (OrderMode::First, phi_hat - b, &mut first),
        ] {
            let hyper = TrainHyper { alpha, inner_steps: 1, order_mode: order, ..Default::default() };
            let got = meta_gradient(&Quadratic, &scalar_phi(phi), &eps, &hyper).unwrap().grads["phi"].data()[0];
            *gap = gap.max((got - expect).abs());
        }
    }
    (second, first)
}

/// Small random model with every parameter perturbed, so adapters are not
/// at their identity initialization.
pub fn random_toy(seed: u64) -> (ModelConfig, ParamStore) {
    let cfg = ModelConfig { adapter_placement: AdapterPlacement::default(), ..one_layer_config() };
    let mut store = build_model(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let all: ParamSet = store
        .iter()
        .map(|(name, p)| {
            let noise = random(&mut rng, p.value.shape(), -0.2, 0.2);
            (name.clone(), p.value.zip_map(&noise, |a, b| a + b).unwrap())
        })
        .collect();
    store.update(&all).unwrap();
    (cfg, store)
}

/// Max relative error between the second-order outer gradient (K inner
/// steps) and central differences of the adapted query loss, over every
/// element of the trainable set.
pub fn maml_fd_error(seed: u64, inner_steps: usize) -> f64 {
    let (cfg, store) = random_toy(seed);
    let (_, trainable) = partition_params(&store).unwrap();
    let phi = store.subset(&trainable).unwrap();
    let learner = SeqLearner::new(&cfg, &store);
    let episode = Episode {
        support: vec![
            ParaphrasePair { src: vec![0, 5, 6, 1], tgt: vec![0, 6, 5, 1] },
            ParaphrasePair { src: vec![0, 7, 8, 9, 1], tgt: vec![0, 9, 1] },
        ],
        query: vec![ParaphrasePair { src: vec![0, 10, 6, 1], tgt: vec![0, 8, 10, 7, 1] }],
    };
    let eps = [episode];
    let hyper = TrainHyper { alpha: 0.3, inner_steps, order_mode: OrderMode::Second, ..Default::default() };
    let analytic = meta_gradient(&learner, &phi, &eps, &hyper).unwrap().grads;
    let mut worst = 0.0f64;
    for (name, value) in &phi {
        for i in 0..value.len() {
            let shifted = |delta: f64| {
                let mut data = value.data().to_vec();
                data[i] += delta;
                let mut p = phi.clone();
                p.insert(name.clone(), value.with_data(data).unwrap());
                adapted_query_loss(&learner, &p, &eps, &hyper).unwrap()
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_error(analytic[name].data()[i], numeric));
        }
    }
    worst
}

/// A reduced synthetic experiment and a small model sized for it.
pub fn small_experiment(seed: u64) -> (ModelConfig, lapa_core::pipeline::ExperimentData) {
    let setup = lapa_core::pipeline::SyntheticSetup {
        n_sources: 2,
        pairs_per_source: 200,
        target_train: 16,
        target_dev: 20,
        target_test: 20,
        meta_val_pairs: 40,
        unlabeled_per_domain: 50,
    };
    let data = lapa_core::pipeline::synthetic_data(&setup, seed).unwrap();
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 32,
        adapter_hidden: 4,
        ..ModelConfig::toy(data.vocab.len())
    };
    (cfg, data)
}
