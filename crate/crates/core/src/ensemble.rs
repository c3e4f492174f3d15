//! Weight averaging along a training trajectory `θ_0 … θ_T`.
//!
//! The Beta moving average weights step `t` by the (unnormalized) symmetric
//! Beta density at `x_t = (t + 0.5) / (T + 1)`. Normalizing constants cancel
//! in the weighted mean, so they are never computed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("step {t} outside [0, {total}]")]
    Step { t: usize, total: usize },
    #[error("beta must be > 0, got {0}")]
    Beta(f64),
    #[error("total steps must be >= 1")]
    NoSteps,
    #[error("parameter vector length {actual}, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("trajectory needs at least 2 points, got {0}")]
    ShortTrajectory(usize),
    #[error("moving average already absorbed all {0} steps")]
    Exhausted(usize),
    #[error("decay must lie in (0, 1), got {0}")]
    Decay(f64),
}

/// Flat snapshot of every trainable parameter in canonical order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn check_len(&self, other: &ParamVector) -> Result<(), EnsembleError> {
        if self.len() != other.len() {
            return Err(EnsembleError::Length {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    /// `self += w·(other − self)`; a no-op coordinate-wise when `other == self`.
    fn blend_toward(&mut self, other: &ParamVector, w: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += w * (b - *a);
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Unnormalized `Beta(β, β)` density at `x = (t + 0.5)/(T + 1)`.
///
/// `x(1 − x)` is evaluated as `(2t + 1)(2(T − t) + 1) / (4(T + 1)²)`, which is
/// symmetric in `t ↔ T − t` bit for bit.
pub fn beta_weight(t: usize, total: usize, beta: f64) -> Result<f64, EnsembleError> {
    if t > total {
        return Err(EnsembleError::Step { t, total });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(EnsembleError::Beta(beta));
    }
    let num = (2 * t + 1) as f64 * (2 * (total - t) + 1) as f64;
    let den = 4.0 * ((total + 1) as f64).powi(2);
    Ok((num / den).powf(beta - 1.0))
}

/// All `T + 1` weights normalized to sum to one.
pub fn normalized_beta_weights(total: usize, beta: f64) -> Result<Vec<f64>, EnsembleError> {
    let raw = (0..=total)
        .map(|t| beta_weight(t, total, beta))
        .collect::<Result<Vec<_>, _>>()?;
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Streaming Beta moving average over a trajectory of `total_steps + 1` points.
#[derive(Debug, Clone, PartialEq)]
pub struct BmaState {
    avg: ParamVector,
    weight_sum: f64,
    step: usize,
    total_steps: usize,
    beta: f64,
}

impl BmaState {
    /// Starts the average at `θ_0`.
    pub fn new(theta0: ParamVector, total_steps: usize, beta: f64) -> Result<Self, EnsembleError> {
        if total_steps < 1 {
            return Err(EnsembleError::NoSteps);
        }
        let weight_sum = beta_weight(0, total_steps, beta)?;
        Ok(Self {
            avg: theta0,
            weight_sum,
            step: 0,
            total_steps,
            beta,
        })
    }

    /// Folds in `θ_{step+1}`.
    pub fn update(&mut self, theta: &ParamVector) -> Result<(), EnsembleError> {
        if self.step >= self.total_steps {
            return Err(EnsembleError::Exhausted(self.total_steps));
        }
        self.avg.check_len(theta)?;
        let alpha = beta_weight(self.step + 1, self.total_steps, self.beta)?;
        let next_sum = self.weight_sum + alpha;
        self.avg.blend_toward(theta, alpha / next_sum);
        self.weight_sum = next_sum;
        self.step += 1;
        Ok(())
    }

    pub fn avg(&self) -> &ParamVector {
        &self.avg
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn into_avg(self) -> ParamVector {
        self.avg
    }
}

pub fn bma_init(
    theta0: ParamVector,
    total_steps: usize,
    beta: f64,
) -> Result<BmaState, EnsembleError> {
    BmaState::new(theta0, total_steps, beta)
}

pub fn bma_update(mut state: BmaState, theta: &ParamVector) -> Result<BmaState, EnsembleError> {
    state.update(theta)?;
    Ok(state)
}

/// Materializes all Beta weights and sums the whole trajectory at once.
pub fn temporal_ensemble(
    trajectory: &[ParamVector],
    beta: f64,
) -> Result<ParamVector, EnsembleError> {
    if trajectory.len() < 2 {
        return Err(EnsembleError::ShortTrajectory(trajectory.len()));
    }
    let weights = normalized_beta_weights(trajectory.len() - 1, beta)?;
    let mut out = vec![0.0; trajectory[0].len()];
    for (theta, w) in trajectory.iter().zip(weights) {
        trajectory[0].check_len(theta)?;
        for (o, v) in out.iter_mut().zip(theta.values()) {
            *o += w * v;
        }
    }
    Ok(ParamVector(out))
}

pub fn uniform_average(trajectory: &[ParamVector]) -> Result<ParamVector, EnsembleError> {
    temporal_ensemble(trajectory, 1.0)
}

/// `avg ← decay·avg + (1 − decay)·θ`.
pub fn ema_update(
    avg: &mut ParamVector,
    theta: &ParamVector,
    decay: f64,
) -> Result<(), EnsembleError> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(EnsembleError::Decay(decay));
    }
    avg.check_len(theta)?;
    avg.blend_toward(theta, 1.0 - decay);
    Ok(())
}

/// Running equal-weight mean, the `β = 1` special case kept in streaming form.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean {
    avg: ParamVector,
    count: usize,
}

impl RunningMean {
    pub fn new(theta0: ParamVector) -> Self {
        Self {
            avg: theta0,
            count: 1,
        }
    }

    pub fn update(&mut self, theta: &ParamVector) -> Result<(), EnsembleError> {
        self.avg.check_len(theta)?;
        self.count += 1;
        self.avg.blend_toward(theta, 1.0 / self.count as f64);
        Ok(())
    }

    pub fn avg(&self) -> &ParamVector {
        &self.avg
    }

    pub fn into_avg(self) -> ParamVector {
        self.avg
    }
}
