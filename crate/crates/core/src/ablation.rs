//! Margin × ensemble ablation grid over several training seeds.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::databench::{split, EmbeddingArchive, SplitKind, Splits};
use crate::eval::{evaluate, zero_shot_evaluate, EvalOptions};
use crate::experiment::{ExperimentConfig, ExperimentError};
use crate::losses::MarginMode;
use crate::model::{ClassBank, HeadKind, Lift};
use crate::par::Execution;
use crate::trainer::{pretrained_classifier, train, EnsembleMode};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub base: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub margins: Vec<MarginMode>,
    pub ensembles: Vec<EnsembleMode>,
    /// Runs (cell, seed) jobs concurrently; each training run stays single-threaded.
    pub execution: Execution,
}

impl AblationConfig {
    /// The full grid: adaptive, fixed and no margin against BMA, EMA,
    /// uniform averaging and no ensemble. The fixed margin equals the mean
    /// off-diagonal class distance, so only adaptivity differs from the
    /// adaptive row.
    pub fn full_grid(base: ExperimentConfig, bank: &ClassBank, seeds: usize) -> Self {
        Self {
            base,
            seeds: (0..seeds as u64).collect(),
            margins: vec![
                MarginMode::Adaptive,
                MarginMode::Fixed(mean_class_distance(bank)),
                MarginMode::None,
            ],
            ensembles: vec![
                EnsembleMode::Bma,
                EnsembleMode::Ema { decay: 0.999 },
                EnsembleMode::Avg,
                EnsembleMode::None,
            ],
            execution: Execution::default(),
        }
    }
}

/// Mean of `D[y][c]` over ordered pairs `y ≠ c`.
pub fn mean_class_distance(bank: &ClassBank) -> f64 {
    let c = bank.num_classes();
    if c < 2 {
        return 0.0;
    }
    let total: f64 = (0..c)
        .flat_map(|y| (0..c).filter(move |&k| k != y).map(move |k| (y, k)))
        .map(|(y, k)| bank.margin(y, k))
        .sum();
    total / (c * (c - 1)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Accuracy of the ensembled model on base classes in the held-out domain.
    pub acc_domain: f64,
    /// Harmonic mean on all classes in the held-out domain.
    pub h_both: f64,
    pub acc_train: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub margin: MarginMode,
    pub ensemble: EnsembleMode,
    pub runs: Vec<SeedOutcome>,
}

impl CellResult {
    pub fn h_both(&self) -> Summary {
        Summary::of(self.runs.iter().map(|r| r.h_both))
    }

    pub fn acc_domain(&self) -> Summary {
        Summary::of(self.runs.iter().map(|r| r.acc_domain))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl Iterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShot {
    pub acc_domain: f64,
    pub h_both: f64,
    pub acc_train: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub zero_shot: ZeroShot,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn cell(&self, margin: MarginMode, ensemble: EnsembleMode) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.margin == margin && c.ensemble == ensemble)
    }
}

fn sequential_opts(tau: f64) -> EvalOptions {
    EvalOptions {
        tau,
        topk: None,
        execution: Execution::Sequential,
    }
}

fn run_one(
    archive: &EmbeddingArchive,
    bank: &ClassBank,
    splits: &Splits,
    cfg: &ExperimentConfig,
) -> Result<SeedOutcome, ExperimentError> {
    let model = pretrained_classifier(
        archive.input_dim,
        bank,
        cfg.hidden,
        cfg.head,
        cfg.trainer.seed,
    )?;
    let result = train(model, bank, &splits.train, &cfg.trainer)?;
    let mut ensembled = result.model.clone();
    ensembled.set_flat_params(result.ensemble_params.values())?;
    let mask = splits.base_mask(bank.num_classes());
    let opts = sequential_opts(cfg.trainer.loss.tau);
    let on = |kind: SplitKind| evaluate(&ensembled, bank, splits.get(kind), &mask, &opts);
    Ok(SeedOutcome {
        seed: cfg.trainer.seed,
        acc_domain: on(SplitKind::Domain)?.acc_all,
        h_both: on(SplitKind::Both)?.acc_h,
        acc_train: on(SplitKind::Train)?.acc_all,
        final_loss: result.final_loss,
    })
}

pub fn run_ablation(
    archive: &EmbeddingArchive,
    cfg: &AblationConfig,
) -> Result<AblationReport, ExperimentError> {
    let bank = archive.bank()?;
    let splits = split(archive, &cfg.base.split)?;
    let mask = splits.base_mask(bank.num_classes());
    let lift = Lift::canonical(archive.input_dim, archive.embed_dim)?;
    let opts = sequential_opts(cfg.base.trainer.loss.tau);
    let zs = |kind: SplitKind| zero_shot_evaluate(&bank, splits.get(kind), &lift, &mask, &opts);
    let zero_shot = ZeroShot {
        acc_domain: zs(SplitKind::Domain)?.acc_all,
        h_both: zs(SplitKind::Both)?.acc_h,
        acc_train: zs(SplitKind::Train)?.acc_all,
    };

    let mut jobs = Vec::new();
    for &margin in &cfg.margins {
        for &ensemble in &cfg.ensembles {
            for &seed in &cfg.seeds {
                let mut job = cfg.base.clone();
                job.trainer.loss.margin = margin;
                job.trainer.ensemble = ensemble;
                job.trainer.seed = seed;
                jobs.push(job);
            }
        }
    }
    let outcomes = cfg
        .execution
        .map(&jobs, |job| run_one(archive, &bank, &splits, job));
    let mut outcomes = outcomes.into_iter();
    let mut cells = Vec::new();
    for &margin in &cfg.margins {
        for &ensemble in &cfg.ensembles {
            let runs = outcomes
                .by_ref()
                .take(cfg.seeds.len())
                .collect::<Result<Vec<_>, _>>()?;
            cells.push(CellResult {
                margin,
                ensemble,
                runs,
            });
        }
    }
    Ok(AblationReport { zero_shot, cells })
}

pub fn margin_label(m: MarginMode) -> String {
    match m {
        MarginMode::Adaptive => "adaptive".into(),
        MarginMode::Fixed(v) => format!("fixed:{v:.3}"),
        MarginMode::None => "none".into(),
    }
}

pub fn ensemble_label(e: EnsembleMode) -> String {
    match e {
        EnsembleMode::Bma => "bma".into(),
        EnsembleMode::Ema { decay } => format!("ema:{decay}"),
        EnsembleMode::Avg => "avg".into(),
        EnsembleMode::None => "none".into(),
    }
}

/// Plain-text table: one row per cell, mean ± std over seeds, in percent.
pub fn render_table(report: &AblationReport, head: HeadKind) -> String {
    let mut out = String::new();
    let head = match head {
        HeadKind::Metric => "metric",
        HeadKind::Linear { .. } => "linear",
    };
    let _ = writeln!(out, "head: {head}");
    let _ = writeln!(
        out,
        "{:<16} {:<10} {:>16} {:>16} {:>10}",
        "margin", "ensemble", "domain acc", "H (both)", "train acc"
    );
    let z = &report.zero_shot;
    let _ = writeln!(
        out,
        "{:<16} {:<10} {:>16} {:>16} {:>10}",
        "zero-shot",
        "-",
        format!("{:.2}", 100.0 * z.acc_domain),
        format!("{:.2}", 100.0 * z.h_both),
        format!("{:.2}", 100.0 * z.acc_train)
    );
    for cell in &report.cells {
        let (d, h) = (cell.acc_domain(), cell.h_both());
        let train = Summary::of(cell.runs.iter().map(|r| r.acc_train));
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>16} {:>16} {:>10}",
            margin_label(cell.margin),
            ensemble_label(cell.ensemble),
            format!("{:.2} ± {:.2}", 100.0 * d.mean, 100.0 * d.std),
            format!("{:.2} ± {:.2}", 100.0 * h.mean, 100.0 * h.std),
            format!("{:.2}", 100.0 * train.mean)
        );
    }
    out
}
