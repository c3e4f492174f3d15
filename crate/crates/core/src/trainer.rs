//! The fine-tuning loop: seeded with-replacement batches, margin metric
//! softmax (or linear-head cross-entropy), AdamW with cosine decay, and a
//! per-step update of the weight ensemble.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::databench::Samples;
use crate::ensemble::{ema_update, BmaState, EnsembleError, ParamVector, RunningMean};
use crate::losses::{cross_entropy_linear, mms_loss, LossConfig, LossError};
use crate::model::{ClassBank, Classifier, Encoder, HeadKind, Lift, ModelError};
use crate::tensorcore::{Tape, Tensor, TensorError};

/// Learning rate tuned for full-size image encoders; kept for reference runs.
pub const REFERENCE_BASE_LR: f64 = 5e-6;

const STREAM_INIT: u64 = 10;
const STREAM_BATCHES: u64 = 11;
/// Rows per forward pass when scoring a whole dataset.
const FULL_PASS_CHUNK: usize = 512;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("sample {index} has class {label} but the class bank has {classes} classes")]
    Label {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid trainer config: {0}")]
    Config(String),
    #[error("learning-rate step {t} outside [0, {total})")]
    Schedule { t: usize, total: usize },
    #[error("parameter/gradient length mismatch: {params} vs {grads} (optimizer holds {state})")]
    Shape {
        params: usize,
        grads: usize,
        state: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EnsembleMode {
    #[default]
    Bma,
    Ema {
        decay: f64,
    },
    Avg,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub loss: LossConfig,
    pub seed: u64,
    pub ensemble: EnsembleMode,
    /// Fold every k-th step into the ensemble (the last step is always included).
    pub ensemble_every: usize,
    /// Keep every ensembled snapshot in the result; memory grows with steps.
    #[serde(skip)]
    pub keep_trajectory: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 36,
            base_lr: 3e-3,
            weight_decay: 0.1,
            beta: 0.5,
            loss: LossConfig::default(),
            seed: 0,
            ensemble: EnsembleMode::Bma,
            ensemble_every: 1,
            keep_trajectory: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.steps < 1 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("learning rate must be >= 0, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if self.ensemble_every < 1 {
            return bad("ensemble cadence must be >= 1".into());
        }
        if let EnsembleMode::Ema { decay } = self.ensemble {
            if !(decay > 0.0 && decay < 1.0) {
                return bad(format!("EMA decay must lie in (0, 1), got {decay}"));
            }
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Steps whose parameters enter the ensemble, starting with step 0.
    pub fn ensemble_steps(&self) -> Vec<usize> {
        std::iter::once(0)
            .chain((1..=self.steps).filter(|t| t % self.ensemble_every == 0 || *t == self.steps))
            .collect()
    }
}

/// `base_lr · ½(1 + cos(π·t/T))`, no warmup.
///
/// Evaluated as `cos²(π·t/2T)`, which avoids cancellation near `t = T`.
pub fn cosine_lr(t: usize, total: usize, base_lr: f64) -> Result<f64, TrainError> {
    if t >= total {
        return Err(TrainError::Schedule { t, total });
    }
    let half_angle = std::f64::consts::FRAC_PI_2 * t as f64 / total as f64;
    Ok(base_lr * half_angle.cos().powi(2))
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(TrainError::Shape {
                params: params.len(),
                grads: grads.len(),
                state: self.m.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * *p);
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// The model after the last optimizer step.
    pub model: Classifier,
    pub final_params: ParamVector,
    /// Ensemble output; equals `final_params` when ensembling is off.
    pub ensemble_params: ParamVector,
    /// Mini-batch loss at each step, recorded before the update.
    pub loss_curve: Vec<f64>,
    pub ensemble_steps: Vec<usize>,
    /// Loss over the whole training set at θ_0 and θ_T.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trajectory: Option<Vec<ParamVector>>,
}

/// The pre-trained starting model for inputs of width `input_dim`.
pub fn pretrained_classifier(
    input_dim: usize,
    bank: &ClassBank,
    hidden: usize,
    head: HeadKind,
    seed: u64,
) -> Result<Classifier, ModelError> {
    let lift = Lift::canonical(input_dim, bank.dim())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    let encoder = Encoder::pretrained(&lift, hidden, &mut rng)?;
    Classifier::with_head(encoder, bank, head)
}

/// Training objective for one batch, recorded on `tape`.
pub fn batch_loss(
    model: &Classifier,
    tape: &mut Tape,
    bank: &ClassBank,
    x: &Tensor,
    labels: &[usize],
    loss: &LossConfig,
) -> Result<(crate::tensorcore::Var, crate::model::ClassifierVars), TrainError> {
    let xv = tape.leaf(x)?;
    let (scores, vars) = model.scores_on(tape, bank, xv)?;
    let value = match model.kind() {
        HeadKind::Metric => mms_loss(tape, scores, labels, bank, loss)?,
        HeadKind::Linear { .. } => cross_entropy_linear(tape, scores, labels)?,
    };
    Ok((value, vars))
}

/// Mean training objective over every sample in `data`.
pub fn dataset_loss(
    model: &Classifier,
    bank: &ClassBank,
    data: &Samples,
    loss: &LossConfig,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for start in (0..data.len()).step_by(FULL_PASS_CHUNK) {
        let end = (start + FULL_PASS_CHUNK).min(data.len());
        let x = Tensor::new(
            vec![end - start, data.input_dim],
            data.features[start * data.input_dim..end * data.input_dim].to_vec(),
        )?;
        let mut tape = Tape::new();
        let (v, _) = batch_loss(model, &mut tape, bank, &x, &data.labels[start..end], loss)?;
        total += tape.value(v)[0] * (end - start) as f64;
    }
    Ok(total / data.len() as f64)
}

/// Seeded uniform sampling of batch indices, with replacement.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    len: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_BATCHES);
        Self { rng, len }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| self.rng.random_range(0..self.len))
            .collect()
    }
}

enum Averager {
    Bma(BmaState),
    Ema { avg: ParamVector, decay: f64 },
    Avg(RunningMean),
    None,
}

impl Averager {
    fn new(
        mode: EnsembleMode,
        theta0: &ParamVector,
        points: usize,
        beta: f64,
    ) -> Result<Self, TrainError> {
        Ok(match mode {
            EnsembleMode::Bma => Averager::Bma(BmaState::new(theta0.clone(), points - 1, beta)?),
            EnsembleMode::Ema { decay } => Averager::Ema {
                avg: theta0.clone(),
                decay,
            },
            EnsembleMode::Avg => Averager::Avg(RunningMean::new(theta0.clone())),
            EnsembleMode::None => Averager::None,
        })
    }

    fn update(&mut self, theta: &ParamVector) -> Result<(), TrainError> {
        match self {
            Averager::Bma(s) => s.update(theta)?,
            Averager::Ema { avg, decay } => ema_update(avg, theta, *decay)?,
            Averager::Avg(r) => r.update(theta)?,
            Averager::None => {}
        }
        Ok(())
    }

    fn finish(self, last: &ParamVector) -> ParamVector {
        match self {
            Averager::Bma(s) => s.into_avg(),
            Averager::Ema { avg, .. } => avg,
            Averager::Avg(r) => r.into_avg(),
            Averager::None => last.clone(),
        }
    }
}

/// Runs exactly `cfg.steps` optimizer steps from `model` (θ_0).
///
/// Single-threaded and deterministic: the same inputs and seed reproduce
/// every loss value and parameter bit for bit.
pub fn train(
    mut model: Classifier,
    bank: &ClassBank,
    data: &Samples,
    cfg: &TrainerConfig,
) -> Result<RunResult, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some((index, &label)) = data
        .labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l >= bank.num_classes())
    {
        return Err(TrainError::Label {
            index,
            label,
            classes: bank.num_classes(),
        });
    }
    if data.input_dim != model.encoder.input_dim() {
        return Err(ModelError::Dimension {
            what: "training features",
            expected: model.encoder.input_dim(),
            actual: data.input_dim,
        }
        .into());
    }

    let ensemble_steps = cfg.ensemble_steps();
    let theta0 = ParamVector::new(model.flat_params());
    let mut averager = Averager::new(cfg.ensemble, &theta0, ensemble_steps.len(), cfg.beta)?;
    let mut trajectory = cfg.keep_trajectory.then(|| vec![theta0.clone()]);
    let initial_loss = dataset_loss(&model, bank, data, &cfg.loss)?;

    let mut sampler = BatchSampler::new(cfg.seed, data.len());
    let mut optimizer = AdamW::new(model.num_params());
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut next_ensemble = 1;
    let d_in = data.input_dim;
    let mut batch = vec![0.0; cfg.batch_size * d_in];
    let mut labels = vec![0usize; cfg.batch_size];

    for t in 1..=cfg.steps {
        for (b, i) in sampler.next_batch(cfg.batch_size).into_iter().enumerate() {
            batch[b * d_in..(b + 1) * d_in].copy_from_slice(data.row(i));
            labels[b] = data.labels[i];
        }
        let x = Tensor::new(vec![cfg.batch_size, d_in], batch.clone())?;

        model.zero_grad();
        let mut tape = Tape::new();
        let (loss, vars) = batch_loss(&model, &mut tape, bank, &x, &labels, &cfg.loss)?;
        loss_curve.push(tape.value(loss)[0]);
        tape.backward(loss)?;
        model.accumulate_grads(&tape, &vars)?;

        let lr = cosine_lr(t - 1, cfg.steps, cfg.base_lr)?;
        let mut params = model.flat_params();
        optimizer.step(&mut params, &model.flat_grads(), lr, cfg.weight_decay)?;
        model.set_flat_params(&params)?;

        if ensemble_steps.get(next_ensemble) == Some(&t) {
            next_ensemble += 1;
            let theta = ParamVector::new(params);
            averager.update(&theta)?;
            if let Some(traj) = trajectory.as_mut() {
                traj.push(theta);
            }
        }
    }

    let final_params = ParamVector::new(model.flat_params());
    let final_loss = dataset_loss(&model, bank, data, &cfg.loss)?;
    Ok(RunResult {
        ensemble_params: averager.finish(&final_params),
        final_params,
        model,
        loss_curve,
        ensemble_steps,
        initial_loss,
        final_loss,
        trajectory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_examples() {
        assert_eq!(cosine_lr(0, 100, 0.5).unwrap(), 0.5);
        assert!((cosine_lr(50, 100, 0.5).unwrap() - 0.25).abs() < 1e-15);
        // ½(1 + cos(π − π/T)) = sin²(π/2T)
        let t = 5000;
        let oracle = (std::f64::consts::PI / (2.0 * t as f64)).sin().powi(2);
        let got = cosine_lr(t - 1, t, 1.0).unwrap();
        assert!((got - oracle).abs() < 1e-12 * oracle);
        assert!((got - 9.87e-8).abs() < 1e-10);
        assert!(matches!(
            cosine_lr(5, 5, 1.0),
            Err(TrainError::Schedule { t: 5, total: 5 })
        ));
    }

    #[test]
    fn adamw_zero_grad_without_decay_is_noop() {
        let mut opt = AdamW::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            opt.step(&mut p, &[0.0; 3], 0.1, 0.0).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adamw_decoupled_decay_closed_form() {
        let mut opt = AdamW::new(2);
        let mut p = vec![1.0, -3.0];
        for _ in 0..4 {
            opt.step(&mut p, &[0.0; 2], 0.01, 0.1).unwrap();
        }
        let k = (1.0f64 - 0.001).powi(4);
        assert!((p[0] - k).abs() < 1e-15 && (p[1] + 3.0 * k).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_hand_unrolled_recurrence() {
        let (b1, b2, eps, lr, wd) = (0.9f64, 0.999f64, 1e-8, 0.1, 0.01);
        let mut oracle_p = 0.7;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=3 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            oracle_p -= lr * (mh / (vh.sqrt() + eps) + wd * oracle_p);
        }
        let mut opt = AdamW::new(1);
        let mut p = vec![0.7];
        for _ in 0..3 {
            opt.step(&mut p, &[1.0], lr, wd).unwrap();
        }
        assert!((p[0] - oracle_p).abs() < 1e-12);
        assert!(opt.v.iter().all(|v| *v >= 0.0));
        assert!(opt.step(&mut p, &[1.0, 2.0], lr, wd).is_err());
    }

    #[test]
    fn ensemble_cadence_keeps_endpoints() {
        let cfg = TrainerConfig {
            steps: 10,
            ensemble_every: 4,
            ..TrainerConfig::default()
        };
        assert_eq!(cfg.ensemble_steps(), vec![0, 4, 8, 10]);
        let every = TrainerConfig {
            steps: 3,
            ..TrainerConfig::default()
        };
        assert_eq!(every.ensemble_steps(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn config_validation() {
        let ok = TrainerConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainerConfig {
                steps: 0,
                ..ok.clone()
            },
            TrainerConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainerConfig {
                base_lr: -1.0,
                ..ok.clone()
            },
            TrainerConfig {
                beta: 0.0,
                ..ok.clone()
            },
            TrainerConfig {
                ensemble: EnsembleMode::Ema { decay: 1.0 },
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
