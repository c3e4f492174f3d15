//! Training objectives over similarity or logit matrices `[B×C]`.
//!
//! All losses reduce to `mean_b(logsumexp(z_b) − z_b[y_b])` for suitably
//! built logits `z`. For the margin metric softmax,
//! `z_b[c] = (S_b[c] + λ·D[y_b][c]) / τ`; since `D[y][y] = 0` the positive
//! logit is `S_b[y]/τ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ClassBank;
use crate::tensorcore::{Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} at batch row {row} is out of range for {classes} classes")]
    Label {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("batch has {rows} rows but {labels} labels")]
    BatchSize { rows: usize, labels: usize },
    #[error("similarities have {sims} classes, class bank has {bank}")]
    ClassCount { sims: usize, bank: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum MarginMode {
    #[default]
    Adaptive,
    /// Constant margin on every negative class.
    Fixed(f64),
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub margin: MarginMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            lambda: 0.3,
            margin: MarginMode::Adaptive,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Config(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let MarginMode::Fixed(m) = self.margin {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(LossError::Config(format!(
                    "fixed margin must be >= 0, got {m}"
                )));
            }
        }
        Ok(())
    }
}

fn check_labels(tape: &Tape, scores: Var, labels: &[usize]) -> Result<(usize, usize), LossError> {
    let shape = tape.shape(scores);
    let (rows, classes) = match shape {
        [c] => (1, *c),
        [b, c] => (*b, *c),
        _ => {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: tape.value(scores).len(),
            }
            .into())
        }
    };
    if rows != labels.len() {
        return Err(LossError::BatchSize {
            rows,
            labels: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(LossError::Label {
            row,
            label,
            classes,
        });
    }
    Ok((rows, classes))
}

/// `mean_b(−log_softmax((scores_b + offsets_b) · inv_temp)[y_b])`.
fn softmax_nll(
    tape: &mut Tape,
    scores: Var,
    labels: &[usize],
    offsets: Option<&[f64]>,
    inv_temp: f64,
) -> Result<Var, LossError> {
    let mut z = scores;
    if let Some(off) = offsets {
        z = tape.add_const(z, off)?;
    }
    if inv_temp != 1.0 {
        z = tape.scale(z, inv_temp)?;
    }
    let ls = tape.log_softmax(z)?;
    let picked = tape.gather(ls, labels)?;
    let mean = tape.mean(picked)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Metric softmax cross-entropy: `mean −log softmax(S/τ)[y]`.
pub fn metric_softmax_loss(
    tape: &mut Tape,
    sims: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var, LossError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(LossError::Config(format!("tau must be > 0, got {tau}")));
    }
    check_labels(tape, sims, labels)?;
    softmax_nll(tape, sims, labels, None, 1.0 / tau)
}

/// Per-row additive margins `λ·D[y_b][c]` (or `λ·m` off the diagonal for a fixed margin).
pub fn margin_offsets(labels: &[usize], bank: &ClassBank, cfg: &LossConfig) -> Option<Vec<f64>> {
    let c = bank.num_classes();
    match cfg.margin {
        MarginMode::None => None,
        MarginMode::Adaptive => Some(
            labels
                .iter()
                .flat_map(|&y| (0..c).map(move |k| cfg.lambda * bank.margin(y, k)))
                .collect(),
        ),
        MarginMode::Fixed(m) => Some(
            labels
                .iter()
                .flat_map(|&y| (0..c).map(move |k| if k == y { 0.0 } else { cfg.lambda * m }))
                .collect(),
        ),
    }
}

/// Margin metric softmax loss.
pub fn mms_loss(
    tape: &mut Tape,
    sims: Var,
    labels: &[usize],
    bank: &ClassBank,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    cfg.validate()?;
    let (_, classes) = check_labels(tape, sims, labels)?;
    if classes != bank.num_classes() {
        return Err(LossError::ClassCount {
            sims: classes,
            bank: bank.num_classes(),
        });
    }
    let offsets = margin_offsets(labels, bank, cfg);
    softmax_nll(tape, sims, labels, offsets.as_deref(), 1.0 / cfg.tau)
}

/// Plain softmax cross-entropy over raw linear-head logits.
pub fn cross_entropy_linear(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
) -> Result<Var, LossError> {
    check_labels(tape, logits, labels)?;
    softmax_nll(tape, logits, labels, None, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::Tensor;

    fn scalar(
        f: impl FnOnce(&mut Tape, Var) -> Result<Var, LossError>,
        shape: &[usize],
        data: &[f64],
    ) -> Result<f64, LossError> {
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap())?;
        let out = f(&mut tape, s)?;
        Ok(tape.value(out)[0])
    }

    fn bank2() -> ClassBank {
        ClassBank::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec!["a".into(), "b".into()]).unwrap()
    }

    #[test]
    fn single_class_metric_loss_is_zero() {
        let v = scalar(
            |t, s| metric_softmax_loss(t, s, &[0], 0.01),
            &[1, 1],
            &[0.3],
        )
        .unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn metric_loss_closed_form() {
        let v = scalar(
            |t, s| metric_softmax_loss(t, s, &[0], 1.0),
            &[1, 2],
            &[1.0, 0.0],
        )
        .unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn uniform_similarities_give_ln_c() {
        for c in [2usize, 5, 17] {
            let v = scalar(
                |t, s| metric_softmax_loss(t, s, &[c - 1], 0.01),
                &[1, c],
                &vec![0.42; c],
            )
            .unwrap();
            assert!((v - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn label_out_of_range() {
        let err = scalar(
            |t, s| metric_softmax_loss(t, s, &[0, 3], 1.0),
            &[2, 2],
            &[0.0; 4],
        );
        assert_eq!(
            err,
            Err(LossError::Label {
                row: 1,
                label: 3,
                classes: 2
            })
        );
    }

    #[test]
    fn two_class_worked_example() {
        let cfg = LossConfig {
            tau: 1.0,
            lambda: 1.0,
            margin: MarginMode::Adaptive,
        };
        let bank = bank2();
        assert_eq!(bank.margin(0, 1), 1.0);
        let v = scalar(
            |t, s| mms_loss(t, s, &[0], &bank, &cfg),
            &[1, 2],
            &[1.0, 0.0],
        )
        .unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fixed_margin_only_on_negatives() {
        let bank = bank2();
        let cfg = LossConfig {
            tau: 1.0,
            lambda: 0.5,
            margin: MarginMode::Fixed(2.0),
        };
        let off = margin_offsets(&[1, 0], &bank, &cfg).unwrap();
        assert_eq!(off, vec![1.0, 0.0, 0.0, 1.0]);
        // S=(1,0), label 0: logits (1, 0+1) → ln 2
        let v = scalar(
            |t, s| mms_loss(t, s, &[0], &bank, &cfg),
            &[1, 2],
            &[1.0, 0.0],
        )
        .unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn class_count_mismatch() {
        let err = scalar(
            |t, s| mms_loss(t, s, &[0], &bank2(), &LossConfig::default()),
            &[1, 3],
            &[0.0; 3],
        );
        assert_eq!(err, Err(LossError::ClassCount { sims: 3, bank: 2 }));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = LossConfig {
            tau: 0.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = LossConfig {
            margin: MarginMode::Fixed(-1.0),
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = LossConfig {
            lambda: -0.1,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let v = scalar(|t, s| cross_entropy_linear(t, s, &[2]), &[1, 4], &[0.0; 4]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        let v = scalar(
            |t, s| cross_entropy_linear(t, s, &[1]),
            &[1, 3],
            &[0.0, 1000.0, 0.0],
        )
        .unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn margin_mode_serializes_with_stable_tags() {
        let s = serde_json::to_string(&MarginMode::Fixed(0.5)).unwrap();
        assert_eq!(s, r#"{"kind":"fixed","value":0.5}"#);
        let back: MarginMode = serde_json::from_str(&s).unwrap();
        assert_eq!(back, MarginMode::Fixed(0.5));
    }
}
