//! Archive → split → train → run file, shared by the CLI and the ablation sweep.

use thiserror::Error;

use crate::databench::{split, DataError, EmbeddingArchive, SplitConfig, SplitKind, Splits};
use crate::eval::{evaluate, EvalError, EvalOptions, EvalReport};
use crate::model::{Activation, HeadKind, ModelError};
use crate::runfile::{RunConfig, RunFile, Weights};
use crate::trainer::{pretrained_classifier, train, RunResult, TrainError, TrainerConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub split: SplitConfig,
    pub trainer: TrainerConfig,
    pub hidden: usize,
    pub head: HeadKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            trainer: TrainerConfig::default(),
            hidden: 64,
            head: HeadKind::Metric,
        }
    }
}

/// Fine-tunes the pre-trained model on the training split of `archive`.
pub fn train_run(
    archive: &EmbeddingArchive,
    cfg: &ExperimentConfig,
) -> Result<(RunFile, RunResult, Splits), ExperimentError> {
    let bank = archive.bank()?;
    let splits = split(archive, &cfg.split)?;
    let model = pretrained_classifier(
        archive.input_dim,
        &bank,
        cfg.hidden,
        cfg.head,
        cfg.trainer.seed,
    )?;
    let result = train(model, &bank, &splits.train, &cfg.trainer)?;
    let run = RunFile {
        config: RunConfig {
            input_dim: archive.input_dim,
            hidden: cfg.hidden,
            embed_dim: archive.embed_dim,
            num_classes: archive.num_classes(),
            activation: Activation::Tanh,
            head: cfg.head,
            split: cfg.split.clone(),
            trainer: cfg.trainer.clone(),
        },
        loss_curve: result.loss_curve.iter().map(|&v| v as f32).collect(),
        final_params: result.final_params.clone(),
        ensemble_params: result.ensemble_params.clone(),
    };
    Ok((run, result, splits))
}

/// Evaluates the run's ensemble (or final) parameters on one split of `archive`.
pub fn evaluate_run(
    run: &RunFile,
    archive: &EmbeddingArchive,
    kind: SplitKind,
    weights: Weights,
    opts: &EvalOptions,
) -> Result<EvalReport, ExperimentError> {
    let bank = archive.bank()?;
    let splits = split(archive, &run.config.split)?;
    let model = run.classifier(&bank, weights)?;
    let mut report = evaluate(
        &model,
        &bank,
        splits.get(kind),
        &splits.base_mask(bank.num_classes()),
        opts,
    )?;
    report.split = kind.name().to_string();
    Ok(report)
}
