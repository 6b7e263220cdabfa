//! The run configuration file: TOML sections for the model, each stage's
//! hyperparameters, decoding, evaluation and data paths. Unknown keys are
//! rejected. Relative data paths are resolved against the file's directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lapa_core::eval::EvalConfig;
use lapa_core::generation::DecodeConfig;
use lapa_core::meta::TrainHyper;
use lapa_core::model::ModelConfig;
use lapa_core::pipeline::{AblationConfig, FinetuneMode, PretrainHyper, SyntheticSetup};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub vocab: Option<PathBuf>,
    /// Unlabeled sentences, one per line.
    pub pretrain: Option<PathBuf>,
    /// Labeled source domains, one TSV file per domain.
    pub sources: Vec<PathBuf>,
    /// Domains held out for meta-validation.
    pub meta_val: Vec<PathBuf>,
    pub target_train: Option<PathBuf>,
    pub target_dev: Option<PathBuf>,
    pub target_test: Option<PathBuf>,
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.vocab, &mut self.pretrain, &mut self.target_train, &mut self.target_dev, &mut self.target_test]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        self.sources.iter_mut().chain(self.meta_val.iter_mut()).for_each(fix);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Model shape; the desk-scale toy model sized to the vocabulary when absent.
    pub model: Option<ModelConfig>,
    pub setup: SyntheticSetup,
    pub pretrain: PretrainHyper,
    pub meta: TrainHyper,
    pub finetune: TrainHyper,
    pub finetune_mode: FinetuneMode,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub data: DataPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AblationConfig::default();
        RunConfig {
            seed: 0,
            model: None,
            setup: a.setup,
            pretrain: a.pretrain,
            meta: a.meta,
            finetune: a.finetune,
            finetune_mode: a.finetune_mode,
            decode: a.decode,
            eval: a.eval,
            data: DataPaths::default(),
        }
    }
}

impl RunConfig {
    /// Keys missing from `text` keep the run defaults, so a partial `[meta]`
    /// section does not drop the tuned values of its siblings.
    pub fn parse(text: &str) -> Result<Self> {
        let mut merged = toml::Table::try_from(RunConfig::default())?;
        merge(&mut merged, text.parse::<toml::Table>()?);
        Ok(merged.try_into()?)
    }

    /// Reads `path`, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base)?;
        cfg.data.resolve(&base);
        Ok(cfg)
    }

    pub fn model_for(&self, vocab_size: usize) -> ModelConfig {
        match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::toy(vocab_size),
        }
    }

    pub fn ablation(&self, vocab_size: usize) -> AblationConfig {
        AblationConfig {
            setup: self.setup.clone(),
            model: self.model_for(vocab_size),
            pretrain: self.pretrain.clone(),
            meta: self.meta.clone(),
            finetune: self.finetune.clone(),
            finetune_mode: self.finetune_mode,
            decode: self.decode.clone(),
            eval: self.eval.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("seed = 1\nbogus = 2\n").is_err());
        assert!(RunConfig::parse("[meta]\nalpha = 0.1\nlearning_rate = 2\n").is_err());
    }

    #[test]
    fn resolved_config_roundtrips() {
        let mut cfg = RunConfig::parse("seed = 7\n[meta]\nbeta = 5e-5\n[model]\nd_model = 8\nn_heads = 2\nn_enc_layers = 1\nn_dec_layers = 1\nd_ff = 16\nvocab_size = 30\nmax_len = 24\nadapter_hidden = 4\n").unwrap();
        cfg.data.sources.push("a.tsv".into());
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.meta.beta, 5e-5);
        assert_eq!(cfg.meta.alpha, RunConfig::default().meta.alpha);
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[data]\nvocab = \"vocab.txt\"\nsources = [\"s1.tsv\", \"/abs/s2.tsv\"]\n").unwrap();
        let cfg = RunConfig::load(Some(&path)).unwrap();
        assert_eq!(cfg.data.vocab.unwrap(), dir.path().join("vocab.txt"));
        assert_eq!(cfg.data.sources[0], dir.path().join("s1.tsv"));
        assert_eq!(cfg.data.sources[1], PathBuf::from("/abs/s2.tsv"));
    }
}
