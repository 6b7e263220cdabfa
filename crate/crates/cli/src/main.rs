//! `lapa`: data generation, the three training stages, decoding, scoring
//! and the experiment drivers. Progress goes to stderr; results go to files
//! under `--out`.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lapa_core::data::{load_pairs, preprocess, read_lines, write_lines, write_text_pairs, DomainData, Vocab};
use lapa_core::eval::{evaluate_files, RougeMode};
use lapa_core::generation::{generate_file, Strategy};
use lapa_core::meta::history_csv;
use lapa_core::model::{param_counts, ModelConfig};
use lapa_core::pipeline::{
    finetune_stage, meta_train_stage, pretrain_stage, run_ablation, source_train_stage, synthetic_data, synthetic_specs,
    Checkpoint, FinetuneMode, StageOutput,
};
use lapa_core::seed::derive;

use config::RunConfig;

/// Outer learning rates tried by `sweep`.
const SWEEP_GRID: [f64; 4] = [1e-5, 5e-5, 1e-6, 5e-6];

#[derive(Parser)]
#[command(name = "lapa", version, about = "Adapter meta-learning for low-resource paraphrase generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic multi-domain corpus and a config that points at it.
    SynthData(Common),
    /// Stage (a): denoising pretraining.
    Pretrain(Common),
    /// Stage (b): adapter meta-training on the source domains.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        /// Pretrained checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Plain minibatch training instead of MAML (the source-trained ablation).
        #[arg(long)]
        plain: bool,
    },
    /// Stage (c): adapter fine-tuning on the target domain.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the configured fine-tuning mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Accept a pretrained checkpoint (ablations).
        #[arg(long)]
        allow_pretrained: bool,
    },
    /// Decodes one paraphrase per input line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Decoding settings are read from the [decode] section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Beam search with this width instead of the configured strategy.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Scores generated lines against references and sources.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        /// Reference file; repeat for multiple references.
        #[arg(long = "ref", required = true)]
        refs: Vec<PathBuf>,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Writes `metric,value` rows here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        rouge_f1: bool,
    },
    /// Prints total and trainable parameter counts.
    ParamReport {
        /// Model from the [model] section; the BART-large-shaped config otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Meta-trains once per outer learning rate and reports the best by
    /// validation loss.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated outer learning rates.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// The three-variant ablation plus the unsupervised configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Runs each seed into its own subdirectory; overrides --seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Maml,
    Plain,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(c) => synth_data(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::MetaTrain { common, checkpoint, plain } => meta_train(&common, &checkpoint, plain),
        Command::Finetune { common, checkpoint, mode, allow_pretrained } => {
            finetune(&common, &checkpoint, mode, allow_pretrained)
        }
        Command::Generate { checkpoint, input, output, config, beam } => {
            let mut dc = RunConfig::load(config.as_deref())?.decode;
            if let Some(w) = beam {
                dc.strategy = Strategy::Beam;
                dc.beam_width = w;
            }
            let n = generate_file(&checkpoint, &input, &output, &dc)?;
            eprintln!("wrote {n} lines to {}", output.display());
            Ok(())
        }
        Command::Evaluate { gen, refs, src, config, out, rouge_f1 } => {
            let mut ec = RunConfig::load(config.as_deref())?.eval;
            if rouge_f1 {
                ec.rouge_mode = RougeMode::F1;
            }
            let refs: Vec<&Path> = refs.iter().map(PathBuf::as_path).collect();
            let report = evaluate_files(&gen, &refs, &src, &ec)?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                report.write_csv(&path)?;
            }
            Ok(())
        }
        Command::ParamReport { config } => {
            let model = match config {
                Some(p) => RunConfig::load(Some(&p))?.model.context("the config has no [model] section")?,
                None => ModelConfig::bart_large_like(),
            };
            model.validate()?;
            let c = param_counts(&model);
            println!("total      {:>14}", c.total);
            println!("trainable  {:>14}", c.trainable);
            println!("frozen     {:>14}", c.total - c.trainable);
            println!("ratio      {:>14.4}", c.ratio());
            Ok(())
        }
        Command::Sweep { common, checkpoint, grid } => sweep(&common, &checkpoint, grid),
        Command::Ablate { common, seeds } => ablate(&common, seeds),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn need<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("data.{key} is not set in the config"))
}

fn load_vocab(cfg: &RunConfig) -> Result<Vocab> {
    Ok(Vocab::load(need(&cfg.data.vocab, "vocab")?)?)
}

fn load_domains(paths: &[PathBuf], vocab: &Vocab) -> Result<Vec<DomainData>> {
    paths
        .iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(DomainData { name, train: load_pairs(p, vocab)?, ..Default::default() })
        })
        .collect()
}

fn save_stage(out: &Path, prefix: &str, stage: &StageOutput) -> Result<()> {
    stage.checkpoint.save(&out.join(format!("{prefix}.ckpt")))?;
    write(&out.join(format!("{prefix}_history.csv")), &history_csv(&stage.history))?;
    if let (Some(init), Some(best)) = (stage.initial_val, stage.best_val) {
        eprintln!("validation loss {init:.4} -> {best:.4}");
    }
    Ok(())
}

fn synth_data(c: &Common) -> Result<()> {
    let mut cfg = c.load()?;
    let data = synthetic_data(&cfg.setup, cfg.seed)?;
    let out = &c.out;
    data.vocab.save(&out.join("vocab.txt"))?;
    let text = |p: &lapa_core::data::ParaphrasePair| (data.vocab.detokenize(&p.src), data.vocab.detokenize(&p.tgt));
    let pretrain: Vec<String> = data.pretrain.iter().map(|s| data.vocab.detokenize(s)).collect();
    write_lines(&out.join("pretrain.txt"), &pretrain)?;
    let mut sources = Vec::new();
    for d in &data.sources {
        let name = format!("{}.tsv", d.name);
        write_text_pairs(&out.join(&name), &d.train.iter().map(text).collect::<Vec<_>>())?;
        sources.push(PathBuf::from(name));
    }
    write_text_pairs(&out.join("meta_val.tsv"), &data.meta_val.train.iter().map(text).collect::<Vec<_>>())?;
    for (split, pairs) in [("train", &data.target.train), ("dev", &data.target.valid), ("test", &data.target.test)] {
        write_text_pairs(&out.join(format!("target_{split}.tsv")), &pairs.iter().map(text).collect::<Vec<_>>())?;
    }
    let spec_dir = out.join("domains");
    std::fs::create_dir_all(&spec_dir)?;
    for spec in synthetic_specs(&cfg.setup, cfg.seed)? {
        write(&spec_dir.join(format!("{}.toml", spec.name)), &spec.to_toml()?)?;
    }
    // paths relative to the output directory, so the config moves with the data
    cfg.data = config::DataPaths {
        vocab: Some("vocab.txt".into()),
        pretrain: Some("pretrain.txt".into()),
        sources,
        meta_val: vec!["meta_val.tsv".into()],
        target_train: Some("target_train.tsv".into()),
        target_dev: Some("target_dev.tsv".into()),
        target_test: Some("target_test.tsv".into()),
    };
    cfg.write_resolved(out)?;
    eprintln!("wrote {} domains and {} pretraining sentences to {}", data.sources.len() + 2, pretrain.len(), out.display());
    Ok(())
}

fn pretrain(c: &Common) -> Result<()> {
    let cfg = c.load()?;
    let vocab = load_vocab(&cfg)?;
    let corpus = read_lines(need(&cfg.data.pretrain, "pretrain")?)?
        .iter()
        .map(|l| preprocess(l, &vocab))
        .collect::<lapa_core::Result<Vec<_>>>()?;
    let model = cfg.model_for(vocab.len());
    eprintln!("pretraining on {} sentences for {} steps", corpus.len(), cfg.pretrain.steps);
    let out = pretrain_stage(&model, &vocab, &corpus, &cfg.pretrain, derive(cfg.seed, "pretrain"))?;
    save_stage(&c.out, "pretrained", &out)?;
    cfg.write_resolved(&c.out)
}

fn meta_train(c: &Common, checkpoint: &Path, plain: bool) -> Result<()> {
    let cfg = c.load()?;
    let parent = Checkpoint::load(checkpoint)?;
    let sources = load_domains(&cfg.data.sources, &parent.vocab)?;
    if sources.is_empty() {
        bail!("data.sources is empty");
    }
    let val = load_domains(&cfg.data.meta_val, &parent.vocab)?;
    let seed = derive(cfg.seed, "meta");
    let (out, prefix) = if plain {
        eprintln!("plain training of adapters on {} source domains", sources.len());
        (source_train_stage(&parent, &sources, &val, &cfg.meta, seed)?, "source_trained")
    } else {
        eprintln!("meta-training adapters on {} source domains", sources.len());
        (meta_train_stage(&parent, &sources, &val, &cfg.meta, seed)?, "meta_trained")
    };
    save_stage(&c.out, prefix, &out)?;
    cfg.write_resolved(&c.out)
}

fn finetune(c: &Common, checkpoint: &Path, mode: Option<ModeArg>, allow_pretrained: bool) -> Result<()> {
    let mut cfg = c.load()?;
    if let Some(m) = mode {
        cfg.finetune_mode = match m {
            ModeArg::Maml => FinetuneMode::Maml,
            ModeArg::Plain => FinetuneMode::Plain,
        };
    }
    let parent = Checkpoint::load(checkpoint)?;
    let load = |p: &Option<PathBuf>| -> Result<Vec<_>> {
        match p {
            Some(p) => Ok(load_pairs(p, &parent.vocab)?),
            None => Ok(Vec::new()),
        }
    };
    let target = DomainData {
        name: "target".into(),
        train: load(&cfg.data.target_train)?,
        valid: load(&cfg.data.target_dev)?,
        test: Vec::new(),
    };
    eprintln!("fine-tuning on {} target pairs", target.train.len());
    let out = finetune_stage(
        &parent,
        &target,
        &cfg.finetune,
        cfg.finetune_mode,
        allow_pretrained,
        derive(cfg.seed, "finetune"),
    )?;
    save_stage(&c.out, "finetuned", &out)?;
    cfg.write_resolved(&c.out)
}

fn sweep(c: &Common, checkpoint: &Path, grid: Option<Vec<f64>>) -> Result<()> {
    let cfg = c.load()?;
    let grid = grid.unwrap_or_else(|| SWEEP_GRID.to_vec());
    let parent = Checkpoint::load(checkpoint)?;
    let sources = load_domains(&cfg.data.sources, &parent.vocab)?;
    let val = load_domains(&cfg.data.meta_val, &parent.vocab)?;
    if val.is_empty() {
        bail!("sweep selects by validation loss; data.meta_val is empty");
    }
    let mut csv = String::from("beta,initial_val,best_val,best_step\n");
    let mut best: Option<(f64, f64)> = None;
    for &beta in &grid {
        eprintln!("outer learning rate {beta:e}");
        let hyper = lapa_core::meta::TrainHyper { beta, ..cfg.meta.clone() };
        let out = meta_train_stage(&parent, &sources, &val, &hyper, derive(cfg.seed, "meta"))?;
        let v = out.best_val.context("validation is disabled (eval_every = 0)")?;
        let step = out.history.iter().filter(|r| r.val_loss == Some(v)).map(|r| r.step).next().unwrap_or(0);
        writeln!(csv, "{beta:e},{},{v},{step}", out.initial_val.unwrap_or(f64::NAN))?;
        save_stage(&c.out, &format!("meta_trained_beta_{beta:e}"), &out)?;
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((beta, v));
        }
    }
    write(&c.out.join("sweep.csv"), &csv)?;
    cfg.write_resolved(&c.out)?;
    let (beta, v) = best.context("empty grid")?;
    println!("best outer learning rate {beta:e} (validation loss {v:.4})");
    Ok(())
}

fn ablate(c: &Common, seeds: Option<Vec<u64>>) -> Result<()> {
    let cfg = c.load()?;
    let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
    let vocab = lapa_core::data::synonym_family_tokens().len() + lapa_core::data::RESERVED.len();
    let acfg = cfg.ablation(vocab);
    let mut summary = String::from("seed,variant,dev_bleu2,test_bleu2\n");
    for &seed in &seeds {
        let dir = if seeds.len() == 1 { c.out.clone() } else { c.out.join(format!("seed_{seed}")) };
        std::fs::create_dir_all(&dir)?;
        let r = run_ablation(&acfg, seed, Some(&dir))?;
        println!("seed {seed}");
        print!("{}", r.to_table());
        for v in &r.variants {
            writeln!(summary, "{seed},{},{:.6},{:.6}", v.variant.label(), v.dev.bleu2, v.test.bleu2)?;
        }
        RunConfig { seed, ..cfg.clone() }.write_resolved(&dir)?;
    }
    if seeds.len() > 1 {
        write(&c.out.join("summary.csv"), &summary)?;
    }
    Ok(())
}
