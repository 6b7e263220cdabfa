//! The desk-scale synthetic experiment: source, meta-validation and target
//! domains from one synonym family, and the three-way ablation
//! (backbone only, + plain source training, + meta-learning).

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::stages::{
    finetune_stage, meta_train_stage, pretrain_stage, source_train_stage, FinetuneMode, PretrainHyper, StageOutput,
};
use crate::data::{synonym_domains, synonym_family_tokens, synth_domain, DomainData, DomainSpec, ParaphrasePair, Vocab};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, EvalConfig, MetricReport};
use crate::generation::{decode, DecodeConfig};
use crate::meta::{history_csv, TrainHyper};
use crate::model::ModelConfig;
use crate::seed::derive;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSetup {
    pub n_sources: usize,
    pub pairs_per_source: usize,
    pub target_train: usize,
    pub target_dev: usize,
    pub target_test: usize,
    pub meta_val_pairs: usize,
    /// Unlabeled sentence pairs per domain added to the pretraining corpus
    /// (both sides, unpaired).
    pub unlabeled_per_domain: usize,
}

impl Default for SyntheticSetup {
    fn default() -> Self {
        SyntheticSetup {
            n_sources: 4,
            pairs_per_source: 2000,
            target_train: 64,
            target_dev: 100,
            target_test: 100,
            meta_val_pairs: 200,
            unlabeled_per_domain: 500,
        }
    }
}

/// Tokenized corpora of one synthetic experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub vocab: Vocab,
    /// Marker-wrapped unlabeled sentences.
    pub pretrain: Vec<Vec<usize>>,
    pub sources: Vec<DomainData>,
    pub meta_val: DomainData,
    pub target: DomainData,
}

fn tokenize(pairs: &[(String, String)], vocab: &Vocab) -> Result<Vec<ParaphrasePair>> {
    pairs.iter().map(|(s, t)| ParaphrasePair::from_text(s, t, vocab)).collect()
}

/// Domain specs in order: sources, then `meta_val`, then `target`.
pub fn synthetic_specs(setup: &SyntheticSetup, seed: u64) -> Result<Vec<DomainSpec>> {
    let mut names: Vec<String> = (1..=setup.n_sources).map(|i| format!("source_{i}")).collect();
    names.push("meta_val".into());
    names.push("target".into());
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    synonym_domains(&refs, derive(seed, "data"))
}

pub fn synthetic_data(setup: &SyntheticSetup, seed: u64) -> Result<ExperimentData> {
    let specs = synthetic_specs(setup, seed)?;
    let vocab = Vocab::from_tokens(synonym_family_tokens());
    let mut pretrain_text: Vec<String> = Vec::new();
    let mut labeled = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let n_labeled = if i < setup.n_sources {
            setup.pairs_per_source
        } else if i == setup.n_sources {
            setup.meta_val_pairs
        } else {
            setup.target_train + setup.target_dev + setup.target_test
        };
        let out = synth_domain(spec, n_labeled + setup.unlabeled_per_domain)?;
        let (lab, pool) = out.pairs.split_at(n_labeled);
        for (s, t) in pool {
            pretrain_text.push(s.clone());
            pretrain_text.push(t.clone());
        }
        if i < setup.n_sources {
            for (s, t) in lab {
                pretrain_text.push(s.clone());
                pretrain_text.push(t.clone());
            }
        }
        labeled.push(tokenize(lab, &vocab)?);
    }
    let pretrain = pretrain_text
        .iter()
        .map(|s| crate::data::preprocess(s, &vocab))
        .collect::<Result<Vec<_>>>()?;
    let target_pairs = labeled.pop().expect("target domain");
    let val_pairs = labeled.pop().expect("meta-validation domain");
    let target = DomainData::split("target", target_pairs, setup.target_dev, setup.target_test)?;
    let meta_val = DomainData { name: "meta_val".into(), train: val_pairs, valid: Vec::new(), test: Vec::new() };
    let sources = labeled
        .into_iter()
        .enumerate()
        .map(|(i, p)| DomainData { name: format!("source_{}", i + 1), train: p, valid: Vec::new(), test: Vec::new() })
        .collect();
    Ok(ExperimentData { vocab, pretrain, sources, meta_val, target })
}

/// Decodes every source of `pairs` and scores against the targets.
pub fn evaluate_pairs(ck: &Checkpoint, pairs: &[ParaphrasePair], dc: &DecodeConfig, ec: &EvalConfig) -> Result<MetricReport> {
    let mut gen = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    let mut srcs = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = decode(ck.params(), &ck.config, &p.src, dc)?;
        gen.push(ck.vocab.detokenize(&out));
        refs.push(vec![ck.vocab.detokenize(&p.tgt)]);
        srcs.push(ck.vocab.detokenize(&p.src));
    }
    evaluate_corpus(&gen, &refs, &srcs, ec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub setup: SyntheticSetup,
    pub model: ModelConfig,
    pub pretrain: PretrainHyper,
    /// Stage (b) hyperparameters, shared by the meta and plain variants.
    pub meta: TrainHyper,
    pub finetune: TrainHyper,
    pub finetune_mode: FinetuneMode,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for AblationConfig {
    /// The desk-scale setting: 1000 denoising steps, 300 meta-steps and 200
    /// fine-tuning steps, second-order MAML with K = 4 inner steps.
    fn default() -> Self {
        let vocab = synonym_family_tokens().len() + crate::data::RESERVED.len();
        let meta = TrainHyper { alpha: 0.3, beta: 3e-3, max_steps: 300, eval_every: 50, ..TrainHyper::default() };
        let finetune = TrainHyper { max_steps: 200, eval_every: 20, ..meta.clone() };
        AblationConfig {
            setup: SyntheticSetup::default(),
            model: ModelConfig::toy(vocab),
            pretrain: PretrainHyper { steps: 1000, ..PretrainHyper::default() },
            meta,
            finetune,
            finetune_mode: FinetuneMode::Maml,
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Pretrain then fine-tune.
    BackboneOnly,
    /// Pretrain, plain source training, fine-tune.
    SourceTrained,
    /// Pretrain, source meta-training, fine-tune.
    MetaLearned,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::BackboneOnly, Variant::SourceTrained, Variant::MetaLearned];

    pub fn label(self) -> &'static str {
        match self {
            Variant::BackboneOnly => "backbone",
            Variant::SourceTrained => "backbone+sd",
            Variant::MetaLearned => "backbone+sd+ml",
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub stage_b: Option<StageOutput>,
    pub finetuned: StageOutput,
    pub dev: MetricReport,
    pub test: MetricReport,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub seed: u64,
    pub pretrained: StageOutput,
    /// Dev scores of the pretrained model used directly.
    pub pretrained_dev: MetricReport,
    /// Meta-trained Φ passed through an empty target set.
    pub unsupervised: StageOutput,
    pub unsupervised_dev: MetricReport,
    pub variants: Vec<VariantResult>,
}

impl AblationResult {
    pub fn variant(&self, v: Variant) -> &VariantResult {
        self.variants.iter().find(|r| r.variant == v).expect("all variants run")
    }

    /// One row per variant plus the unsupervised and pretrain-only rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,split,bleu2,bleu4,ibleu,rouge1,rouge2\n");
        let mut row = |name: &str, split: &str, r: &MetricReport| {
            let _ = writeln!(s, "{name},{split},{:.6},{:.6},{:.6},{:.6},{:.6}", r.bleu2, r.bleu4, r.ibleu, r.rouge1, r.rouge2);
        };
        row("pretrained", "dev", &self.pretrained_dev);
        row("unsupervised", "dev", &self.unsupervised_dev);
        for v in &self.variants {
            row(v.variant.label(), "dev", &v.dev);
            row(v.variant.label(), "test", &v.test);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16}{:>9}{:>9}{:>9}{:>9}{:>9}\n", "variant", "dev-B2", "test-B2", "test-B4", "iBLEU", "R2");
        for v in &self.variants {
            let _ = writeln!(
                s,
                "{:<16}{:>9.2}{:>9.2}{:>9.2}{:>9.2}{:>9.2}",
                v.variant.label(),
                v.dev.bleu2,
                v.test.bleu2,
                v.test.bleu4,
                v.test.ibleu,
                v.test.rouge2
            );
        }
        s
    }
}

fn log(msg: &str) {
    eprintln!("[ablate] {msg}");
}

/// Runs the three ablation variants and the unsupervised configuration on
/// one seed. With `out`, checkpoints, histories and metric CSVs are written
/// there.
pub fn run_ablation(cfg: &AblationConfig, seed: u64, out: Option<&Path>) -> Result<AblationResult> {
    let data = synthetic_data(&cfg.setup, seed)?;
    if data.vocab.len() != cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "model vocab_size {} but the synthetic vocabulary has {} tokens",
            cfg.model.vocab_size,
            data.vocab.len()
        )));
    }
    let write = |name: &str, text: &str| -> Result<()> {
        if let Some(dir) = out {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        }
        Ok(())
    };
    let save = |name: &str, ck: &Checkpoint| -> Result<()> {
        match out {
            Some(dir) => ck.save(&dir.join(name)),
            None => Ok(()),
        }
    };
    let target_dev = &data.target.valid;
    log(&format!("seed {seed}: pretraining on {} sentences", data.pretrain.len()));
    let pretrained = pretrain_stage(&cfg.model, &data.vocab, &data.pretrain, &cfg.pretrain, derive(seed, "pretrain"))?;
    save("pretrained.ckpt", &pretrained.checkpoint)?;
    write("pretrain_history.csv", &history_csv(&pretrained.history))?;
    let pretrained_dev = evaluate_pairs(&pretrained.checkpoint, target_dev, &cfg.decode, &cfg.eval)?;

    let val = std::slice::from_ref(&data.meta_val);
    log("meta-training adapters on source domains");
    let meta = meta_train_stage(&pretrained.checkpoint, &data.sources, val, &cfg.meta, derive(seed, "meta"))?;
    save("meta_trained.ckpt", &meta.checkpoint)?;
    write("meta_history.csv", &history_csv(&meta.history))?;
    log("plain training of adapters on source domains");
    let plain = source_train_stage(&pretrained.checkpoint, &data.sources, val, &cfg.meta, derive(seed, "meta"))?;
    save("source_trained.ckpt", &plain.checkpoint)?;
    write("source_history.csv", &history_csv(&plain.history))?;

    let empty = crate::data::DomainData { name: "target".into(), ..Default::default() };
    let unsupervised = finetune_stage(&meta.checkpoint, &empty, &cfg.finetune, cfg.finetune_mode, false, derive(seed, "finetune"))?;
    let unsupervised_dev = evaluate_pairs(&unsupervised.checkpoint, target_dev, &cfg.decode, &cfg.eval)?;

    let mut variants = Vec::new();
    for v in Variant::ALL {
        let (parent, stage_b) = match v {
            Variant::BackboneOnly => (&pretrained.checkpoint, None),
            Variant::SourceTrained => (&plain.checkpoint, Some(plain.clone())),
            Variant::MetaLearned => (&meta.checkpoint, Some(meta.clone())),
        };
        log(&format!("fine-tuning {}", v.label()));
        let ft = finetune_stage(
            parent,
            &data.target,
            &cfg.finetune,
            cfg.finetune_mode,
            v == Variant::BackboneOnly,
            derive(seed, "finetune"),
        )?;
        let dev = evaluate_pairs(&ft.checkpoint, target_dev, &cfg.decode, &cfg.eval)?;
        let test = evaluate_pairs(&ft.checkpoint, &data.target.test, &cfg.decode, &cfg.eval)?;
        let tag = v.label().replace('+', "_");
        save(&format!("finetuned_{tag}.ckpt"), &ft.checkpoint)?;
        write(&format!("finetune_history_{tag}.csv"), &history_csv(&ft.history))?;
        log(&format!("{}: dev BLEU-2 {:.2}", v.label(), dev.bleu2));
        variants.push(VariantResult { variant: v, stage_b, finetuned: ft, dev, test });
    }
    let result = AblationResult { seed, pretrained, pretrained_dev, unsupervised, unsupervised_dev, variants };
    write("metrics.csv", &result.to_csv())?;
    Ok(result)
}
