use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, StageTag};
use super::noise::{corrupt_with, NoiseConfig};
use crate::data::{sample_batch, sample_meta_task, DomainData, ParaphrasePair, Vocab};
use crate::error::{Error, Result};
use crate::meta::{meta_train_scored, plain_train, adapted_query_loss, Episode, HistoryRow, MetaTrainOutput, SeqLearner, TrainHyper};
use crate::model::{build_model, pairs_loss, Bindings, ModelConfig, ParamSet, ParamStore, Partition, Reduction};
use crate::seed::derive;
use crate::autodiff::Graph;

/// Denoising pretraining of the backbone and normalization layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub noise: NoiseConfig,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper { steps: 300, batch_size: 16, lr: 3e-3, weight_decay: 0.01, clip_norm: 1.0, noise: NoiseConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    #[default]
    Maml,
    Plain,
}

/// A stage's checkpoint with its training record.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub best_val: Option<f64>,
    pub initial_val: Option<f64>,
}

impl StageOutput {
    fn untrained(checkpoint: Checkpoint) -> Self {
        StageOutput { checkpoint, history: Vec::new(), best_val: None, initial_val: None }
    }

    fn from_run(checkpoint: Checkpoint, run: MetaTrainOutput) -> Self {
        StageOutput { checkpoint, history: run.history, best_val: run.best_val, initial_val: run.initial_val }
    }
}

fn names_with(store: &ParamStore, keep: impl Fn(Partition) -> bool) -> Vec<String> {
    store.iter().filter(|(_, p)| p.tag.is_some_and(&keep)).map(|(n, _)| n.clone()).collect()
}

/// Adapter and normalization parameter names.
pub fn phi_names(store: &ParamStore) -> Vec<String> {
    names_with(store, Partition::is_trainable)
}

/// Per-token NLL over `pairs`, in chunks of `chunk` pairs.
pub fn mean_nll(cfg: &ModelConfig, store: &ParamStore, phi: &ParamSet, pairs: &[ParaphrasePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs".into()));
    }
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in pairs.chunks(16) {
        let mut g = Graph::new();
        let mut b = Bindings::constants(&mut g, store);
        let vars: Vec<(String, crate::autodiff::Var)> =
            phi.iter().map(|(n, v)| (n.clone(), g.constant(v.clone()))).collect();
        b.overlay(vars.iter().map(|(n, v)| (n, v)));
        let loss = pairs_loss(&mut g, &b, cfg, chunk, Reduction::Sum)?;
        total += g.value(loss).data()[0];
        tokens += chunk.iter().map(|p| p.tgt.len() - 1).sum::<usize>();
    }
    Ok(total / tokens as f64)
}

/// Stage (a): trains θ and the normalization layers to reconstruct each
/// sentence from a corrupted copy. Adapters stay at their identity init.
pub fn pretrain_stage(
    cfg: &ModelConfig,
    vocab: &Vocab,
    corpus: &[Vec<usize>],
    hyper: &PretrainHyper,
    seed: u64,
) -> Result<StageOutput> {
    hyper.noise.validate()?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Config(format!("vocabulary has {} tokens, config expects {}", vocab.len(), cfg.vocab_size)));
    }
    let store = build_model(cfg, derive(seed, "init"))?;
    if hyper.steps == 0 {
        return Ok(StageOutput::untrained(Checkpoint::root(cfg.clone(), vocab.clone(), store, seed)?));
    }
    if corpus.len() < hyper.batch_size {
        return Err(Error::CorpusTooSmall { need: hyper.batch_size, have: corpus.len() });
    }
    let names = names_with(&store, |t| t != Partition::Adapter);
    let phi = store.subset(&names)?;
    let th = TrainHyper {
        beta: hyper.lr,
        weight_decay: hyper.weight_decay,
        clip_norm: hyper.clip_norm,
        max_steps: hyper.steps,
        eval_every: 0,
        ..TrainHyper::default()
    };
    let mut sampler = ChaCha8Rng::seed_from_u64(derive(seed, "sampler"));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive(seed, "noise") ^ hyper.noise.seed);
    let idx: Vec<usize> = (0..corpus.len()).collect();
    let learner = SeqLearner::new(cfg, &store);
    let run = plain_train(
        &learner,
        phi,
        |_| {
            let picked = rand::seq::index::sample(&mut sampler, idx.len(), hyper.batch_size);
            Ok(picked
                .into_iter()
                .map(|i| {
                    let x = &corpus[i];
                    ParaphrasePair { src: corrupt_with(x, &hyper.noise, &mut noise_rng), tgt: x.clone() }
                })
                .collect())
        },
        None,
        &th,
    )?;
    let mut trained = store.clone();
    trained.update(&run.phi)?;
    Ok(StageOutput::from_run(Checkpoint::root(cfg.clone(), vocab.clone(), trained, seed)?, run))
}

fn episodes_from(domains: &[DomainData], n: usize, hyper: &TrainHyper, rng: &mut ChaCha8Rng) -> Result<Vec<Episode<Vec<ParaphrasePair>>>> {
    (0..n)
        .map(|_| {
            let t = sample_meta_task(domains, hyper.task_batch_size, hyper.shared_support_query, rng)?;
            Ok(Episode { support: t.support, query: t.query })
        })
        .collect()
}

fn require_stage(ck: &Checkpoint, stage: StageTag) -> Result<()> {
    if ck.stage != stage {
        return Err(Error::Provenance(format!("expected a {} checkpoint, got {}", stage.name(), ck.stage.name())));
    }
    Ok(())
}

/// Stage (b): MAML over source-domain tasks with θ frozen. Φ is selected by
/// the adapted query loss on tasks from `val_domains`.
pub fn meta_train_stage(
    parent: &Checkpoint,
    sources: &[DomainData],
    val_domains: &[DomainData],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<StageOutput> {
    require_stage(parent, StageTag::Pretrained)?;
    let store = parent.params();
    let phi = store.subset(&phi_names(store))?;
    let learner = SeqLearner::new(&parent.config, store);
    let mut val_rng = ChaCha8Rng::seed_from_u64(derive(seed, "val"));
    let val = if val_domains.is_empty() || hyper.eval_every == 0 {
        Vec::new()
    } else {
        episodes_from(val_domains, hyper.val_tasks, hyper, &mut val_rng)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "sampler"));
    let mut score = |phi: &ParamSet| adapted_query_loss(&learner, phi, &val, hyper);
    let score: Option<&mut dyn FnMut(&ParamSet) -> Result<f64>> = if val.is_empty() { None } else { Some(&mut score) };
    let run = meta_train_scored(
        &learner,
        phi,
        |_| episodes_from(sources, hyper.meta_batch_tasks, hyper, &mut rng),
        score,
        hyper,
    )?;
    let mut trained = store.clone();
    trained.update(&run.phi)?;
    let ck = parent
        .child(StageTag::MetaTrained, trained, seed)?
        .with_note(format!("meta-trained on {} source domains", sources.len()));
    Ok(StageOutput::from_run(ck, run))
}

/// Stage (b) without meta-learning: Φ is trained on source batches by plain
/// minibatch descent, with the same number of pairs per step as a meta
/// batch. Φ is selected by plain NLL on the validation domains.
pub fn source_train_stage(
    parent: &Checkpoint,
    sources: &[DomainData],
    val_domains: &[DomainData],
    hyper: &TrainHyper,
    seed: u64,
) -> Result<StageOutput> {
    require_stage(parent, StageTag::Pretrained)?;
    let store = parent.params();
    let cfg = &parent.config;
    let phi = store.subset(&phi_names(store))?;
    let learner = SeqLearner::new(cfg, store);
    let mut val_rng = ChaCha8Rng::seed_from_u64(derive(seed, "val"));
    let val_pairs: Vec<ParaphrasePair> = if val_domains.is_empty() || hyper.eval_every == 0 {
        Vec::new()
    } else {
        episodes_from(val_domains, hyper.val_tasks, hyper, &mut val_rng)?
            .into_iter()
            .flat_map(|e| e.query)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "sampler"));
    let mut score = |phi: &ParamSet| mean_nll(cfg, store, phi, &val_pairs);
    let score: Option<&mut dyn FnMut(&ParamSet) -> Result<f64>> = if val_pairs.is_empty() { None } else { Some(&mut score) };
    let run = plain_train(
        &learner,
        phi,
        |_| {
            Ok(episodes_from(sources, hyper.meta_batch_tasks, hyper, &mut rng)?
                .into_iter()
                .flat_map(|e| e.support.into_iter().chain(e.query))
                .collect())
        },
        score,
        hyper,
    )?;
    let mut trained = store.clone();
    trained.update(&run.phi)?;
    let ck = parent
        .child(StageTag::MetaTrained, trained, seed)?
        .with_note(format!("plain training on {} source domains", sources.len()));
    Ok(StageOutput::from_run(ck, run))
}

/// Stage (c): adapts Φ to the target domain with θ frozen. An empty target
/// training set returns the parent's parameters unchanged. A pretrained
/// parent is accepted only with `allow_pretrained` (ablations).
pub fn finetune_stage(
    parent: &Checkpoint,
    target: &DomainData,
    hyper: &TrainHyper,
    mode: FinetuneMode,
    allow_pretrained: bool,
    seed: u64,
) -> Result<StageOutput> {
    match parent.stage {
        StageTag::MetaTrained => {}
        StageTag::Pretrained if allow_pretrained => {}
        StageTag::Pretrained => {
            return Err(Error::Provenance("fine-tuning a pretrained checkpoint needs the ablation flag".into()))
        }
        StageTag::Finetuned => return Err(Error::Provenance("checkpoint is already fine-tuned".into())),
    }
    let store = parent.params();
    if target.train.is_empty() {
        let ck = parent.child(StageTag::Finetuned, store.clone(), seed)?.with_note("empty target set: no training");
        return Ok(StageOutput::untrained(ck));
    }
    let cfg = &parent.config;
    let phi = store.subset(&phi_names(store))?;
    let learner = SeqLearner::new(cfg, store);
    let mut score = |phi: &ParamSet| mean_nll(cfg, store, phi, &target.valid);
    let score: Option<&mut dyn FnMut(&ParamSet) -> Result<f64>> =
        if target.valid.is_empty() { None } else { Some(&mut score) };
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, "sampler"));
    let domains = std::slice::from_ref(target);
    let run = match mode {
        FinetuneMode::Maml => meta_train_scored(
            &learner,
            phi,
            |_| episodes_from(domains, hyper.meta_batch_tasks, hyper, &mut rng),
            score,
            hyper,
        )?,
        FinetuneMode::Plain => {
            plain_train(&learner, phi, |_| Ok(sample_batch(&target.train, hyper.task_batch_size, &mut rng)), score, hyper)?
        }
    };
    let mut trained = store.clone();
    trained.update(&run.phi)?;
    let note = match mode {
        FinetuneMode::Maml => "fine-tuned with MAML",
        FinetuneMode::Plain => "fine-tuned with plain training",
    };
    let ck = parent.child(StageTag::Finetuned, trained, seed)?.with_note(note);
    Ok(StageOutput::from_run(ck, run))
}
