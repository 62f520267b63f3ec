//! Losses, fine-tuning, evaluation, synthetic data and experiment harnesses.

mod experiments;
mod finetune;
mod loss;
mod metrics;
mod synthetic;

pub use experiments::{
    compare_peft_variants, kshot_experiment, Cell, ExperimentConfig, KShotReport, KShotRow, Variant, VariantReport,
    VariantRow, PAPER_KSHOT, PAPER_KSHOT_SHOTS,
};
pub use finetune::{
    finetune, pretrain_decoder, sample_training_prompts, LabeledExample, Origin, ProgressEvent, TrainConfig,
    TrainHistory,
};
pub use loss::{dice_loss, focal_loss, segmentation_loss, target_tensor, LossConfig};
pub use metrics::evaluate_miou;
pub use synthetic::{make_synthetic_dataset, DatasetSpec, DEFAULT_IMAGE_SIZE, FAMILIES, MAX_COVERAGE, PRETRAIN_FAMILY};
