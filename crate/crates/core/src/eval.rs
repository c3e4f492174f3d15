//! Accuracy reports: base/new/harmonic mean, per-domain and per-class
//! accuracy, and optional top-k rankings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::databench::Samples;
use crate::model::{ClassBank, Classifier, HeadKind, Lift, ModelError};
use crate::par::Execution;
use crate::tensorcore::{Tape, Tensor, TensorError};
use crate::trainer::pretrained_classifier;

/// Rows per forward pass; also the unit of work handed to each thread.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("invalid temperature {0}; must be > 0")]
    Tau(f64),
    #[error("sample {index} has class {label} but the class bank has {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedClass {
    pub class: usize,
    /// Similarity divided by τ (raw logit for a linear head).
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    /// Row index in the source archive.
    pub sample: usize,
    pub label: usize,
    pub ranked: Vec<RankedClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub acc_base: f64,
    pub acc_new: f64,
    pub acc_h: f64,
    pub acc_all: f64,
    pub n_base: usize,
    pub n_new: usize,
    pub per_domain: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<Vec<TopK>>,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub tau: f64,
    pub topk: Option<usize>,
    pub execution: Execution,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tau: 0.01,
            topk: None,
            execution: Execution::default(),
        }
    }
}

/// `2ab/(a+b)`, or 0 when both are 0.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Index of the largest score; ties go to the lowest class id.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// Class scores `[N×C]` for every sample, row-major.
pub fn score_samples(
    model: &Classifier,
    bank: &ClassBank,
    samples: &Samples,
) -> Result<Vec<f64>, EvalError> {
    let mut out = Vec::with_capacity(samples.len() * bank.num_classes());
    for start in (0..samples.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(samples.len());
        out.extend(score_rows(model, bank, samples, start, end)?);
    }
    Ok(out)
}

fn score_rows(
    model: &Classifier,
    bank: &ClassBank,
    samples: &Samples,
    start: usize,
    end: usize,
) -> Result<Vec<f64>, EvalError> {
    let d = samples.input_dim;
    let x = Tensor::new(
        vec![end - start, d],
        samples.features[start * d..end * d].to_vec(),
    )?;
    let mut tape = Tape::new();
    let xv = tape.leaf(&x)?;
    let (scores, _) = model.scores_on(&mut tape, bank, xv)?;
    Ok(tape.value(scores).to_vec())
}

#[derive(Debug, Default)]
struct Counts {
    base: (usize, usize),
    new: (usize, usize),
    domain: BTreeMap<usize, (usize, usize)>,
    class: BTreeMap<usize, (usize, usize)>,
    topk: Vec<TopK>,
}

impl Counts {
    fn merge(mut self, other: Counts) -> Counts {
        let add = |a: &mut (usize, usize), b: (usize, usize)| {
            a.0 += b.0;
            a.1 += b.1;
        };
        add(&mut self.base, other.base);
        add(&mut self.new, other.new);
        for (k, v) in other.domain {
            add(self.domain.entry(k).or_default(), v);
        }
        for (k, v) in other.class {
            add(self.class.entry(k).or_default(), v);
        }
        self.topk.extend(other.topk);
        self
    }
}

fn ratio((correct, total): (usize, usize)) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Scores every sample against all classes in `bank` and tallies accuracy.
///
/// `base_mask[c]` marks base classes; samples of other classes count as new.
/// Chunks may run on several threads; counts merge by addition so the report
/// does not depend on the execution strategy.
pub fn evaluate(
    model: &Classifier,
    bank: &ClassBank,
    samples: &Samples,
    base_mask: &[bool],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if !(opts.tau > 0.0 && opts.tau.is_finite()) {
        return Err(EvalError::Tau(opts.tau));
    }
    let classes = bank.num_classes();
    if let Some((index, &label)) = samples
        .labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= classes)
    {
        return Err(EvalError::Label {
            index,
            label,
            classes,
        });
    }
    // Linear-head logits are reported as-is; cosine scores are divided by τ.
    let score_scale = match model.kind() {
        HeadKind::Metric => 1.0 / opts.tau,
        HeadKind::Linear { .. } => 1.0,
    };
    let starts: Vec<usize> = (0..samples.len()).step_by(EVAL_CHUNK).collect();
    let partial = opts
        .execution
        .map(&starts, |&start| -> Result<Counts, EvalError> {
            let end = (start + EVAL_CHUNK).min(samples.len());
            let scores = score_rows(model, bank, samples, start, end)?;
            let mut counts = Counts::default();
            for (r, row) in scores.chunks(classes).enumerate() {
                let i = start + r;
                let label = samples.labels[i];
                let hit = usize::from(predict(row) == label);
                let group = if base_mask.get(label).copied().unwrap_or(false) {
                    &mut counts.base
                } else {
                    &mut counts.new
                };
                group.0 += hit;
                group.1 += 1;
                let dom = counts.domain.entry(samples.domains[i]).or_default();
                dom.0 += hit;
                dom.1 += 1;
                let cls = counts.class.entry(label).or_default();
                cls.0 += hit;
                cls.1 += 1;
                if let Some(k) = opts.topk {
                    counts.topk.push(TopK {
                        sample: samples.ids[i],
                        label,
                        ranked: rank(row, k, score_scale),
                    });
                }
            }
            Ok(counts)
        });
    let mut total = Counts::default();
    for part in partial {
        total = total.merge(part?);
    }

    let acc_base = ratio(total.base);
    let acc_new = ratio(total.new);
    Ok(EvalReport {
        split: String::new(),
        acc_base,
        acc_new,
        acc_h: harmonic_mean(acc_base, acc_new),
        acc_all: ratio((total.base.0 + total.new.0, total.base.1 + total.new.1)),
        n_base: total.base.1,
        n_new: total.new.1,
        per_domain: total
            .domain
            .into_iter()
            .map(|(k, v)| (k, ratio(v)))
            .collect(),
        per_class: total
            .class
            .into_iter()
            .map(|(k, v)| (k, ratio(v)))
            .collect(),
        topk: opts.topk.map(|_| total.topk),
        config: serde_json::Value::Null,
    })
}

/// The `k` best classes, highest first, ties by lowest id.
fn rank(row: &[f64], k: usize, scale: f64) -> Vec<RankedClass> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(k)
        .map(|class| RankedClass {
            class,
            score: row[class] * scale,
        })
        .collect()
}

/// Evaluation with the untrained pre-trained encoder (nearest class through `Pᵀx`).
pub fn zero_shot_evaluate(
    bank: &ClassBank,
    samples: &Samples,
    lift: &Lift,
    base_mask: &[bool],
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    // Extra hidden units start with zero output weights, so the width and
    // seed do not change θ₀'s embeddings; the narrowest encoder suffices.
    let model = pretrained_classifier(
        lift.input_dim(),
        bank,
        lift.embed_dim(),
        HeadKind::Metric,
        0,
    )?;
    evaluate(&model, bank, samples, base_mask, opts)
}
