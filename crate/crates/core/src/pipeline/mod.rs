//! The three training stages, denoising noise and checkpoints.

mod checkpoint;
mod experiment;
mod noise;
mod stages;

pub use checkpoint::{Checkpoint, StageTag, FORMAT_VERSION, MAGIC};
pub use noise::{corrupt, corrupt_with, NoiseConfig};
pub use stages::{
    finetune_stage, mean_nll, meta_train_stage, phi_names, pretrain_stage, source_train_stage, FinetuneMode,
    PretrainHyper, StageOutput,
};
pub use experiment::{
    evaluate_pairs, run_ablation, synthetic_data, synthetic_specs, AblationConfig, AblationResult, ExperimentData, SyntheticSetup, Variant,
    VariantResult,
};
