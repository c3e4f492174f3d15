//! The RUNF training-output file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "RUNF"            4 bytes magic
//! 0x01              version byte
//! config length     u32, then that many bytes of UTF-8 JSON
//! loss curve        u32 T, then T f32
//! final params      u32 P, then P f64
//! ensemble params   u32 P, then P f64
//! ```
//!
//! Parameters are the classifier's flat vector: encoder `w1, b1, w2, b2`
//! row-major, then the linear head weights when the head is linear.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio::{put_len, FormatError, Reader};
use crate::databench::SplitConfig;
use crate::ensemble::ParamVector;
use crate::model::{Activation, ClassBank, Classifier, Encoder, HeadKind, ModelError};
use crate::trainer::TrainerConfig;

pub const RUN_MAGIC: &[u8; 4] = b"RUNF";
pub const RUN_VERSION: u8 = 1;

/// Everything needed to rebuild the model shape and to rerun training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub head: HeadKind,
    pub split: SplitConfig,
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub config: RunConfig,
    pub loss_curve: Vec<f32>,
    pub final_params: ParamVector,
    pub ensemble_params: ParamVector,
}

/// Which parameter section to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Final,
    Ensemble,
}

impl RunFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        let config =
            serde_json::to_vec(&self.config).map_err(|e| FormatError::Invalid(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(RUN_MAGIC);
        out.push(RUN_VERSION);
        put_len(&mut out, config.len())?;
        out.extend_from_slice(&config);
        put_len(&mut out, self.loss_curve.len())?;
        self.loss_curve
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for p in [&self.final_params, &self.ensemble_params] {
            put_len(&mut out, p.len())?;
            p.values()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(RUN_MAGIC)?;
        let version = r.u8()?;
        if version != RUN_VERSION {
            return Err(FormatError::Version {
                found: version,
                supported: RUN_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let config: RunConfig = serde_json::from_slice(r.take(len)?)
            .map_err(|e| FormatError::Invalid(format!("run config: {e}")))?;
        let steps = r.u32()? as usize;
        let loss_curve = r.f32s(steps)?;
        let p = r.u32()? as usize;
        let final_params = ParamVector::new(r.f64s(p)?);
        let q = r.u32()? as usize;
        let ensemble_params = ParamVector::new(r.f64s(q)?);
        r.finish()?;
        if p != q {
            return Err(FormatError::Invalid(format!(
                "final and ensemble sections differ in length ({p} vs {q})"
            )));
        }
        Ok(Self {
            config,
            loss_curve,
            final_params,
            ensemble_params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the classifier with the chosen parameter section.
    pub fn classifier(&self, bank: &ClassBank, weights: Weights) -> Result<Classifier, ModelError> {
        let c = &self.config;
        if bank.num_classes() != c.num_classes || bank.dim() != c.embed_dim {
            return Err(ModelError::Dimension {
                what: "class bank for this run",
                expected: c.num_classes * c.embed_dim,
                actual: bank.num_classes() * bank.dim(),
            });
        }
        let (d_in, h, d) = (c.input_dim, c.hidden, c.embed_dim);
        let encoder = Encoder::from_parts(
            vec![0.0; d_in * h],
            vec![0.0; h],
            vec![0.0; h * d],
            vec![0.0; d],
            (d_in, h, d),
            c.activation,
        )?;
        let mut model = Classifier::with_head(encoder, bank, c.head)?;
        let params = match weights {
            Weights::Final => &self.final_params,
            Weights::Ensemble => &self.ensemble_params,
        };
        model.set_flat_params(params.values())?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunFile {
        RunFile {
            config: RunConfig {
                input_dim: 3,
                hidden: 2,
                embed_dim: 2,
                num_classes: 2,
                activation: Activation::Tanh,
                head: HeadKind::Metric,
                split: SplitConfig::default(),
                trainer: TrainerConfig {
                    steps: 2,
                    ..TrainerConfig::default()
                },
            },
            loss_curve: vec![0.5, 0.25],
            final_params: ParamVector::new((0..14).map(|i| i as f64 * 0.1).collect()),
            ensemble_params: ParamVector::new((0..14).map(|i| -(i as f64)).collect()),
        }
    }

    #[test]
    fn round_trip() {
        let run = sample();
        let bytes = run.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"RUNF\x01");
        assert_eq!(RunFile::from_bytes(&bytes).unwrap(), run);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            RunFile::from_bytes(&bad),
            Err(FormatError::BadMagic { .. })
        ));
        assert!(matches!(
            RunFile::from_bytes(&bytes[..bytes.len() - 3]),
            Err(FormatError::Truncated { .. })
        ));
    }

    #[test]
    fn rebuilds_classifier() {
        let run = sample();
        let bank =
            ClassBank::new(vec![1.0, 0.0, 0.0, 1.0], 2, vec!["a".into(), "b".into()]).unwrap();
        let m = run.classifier(&bank, Weights::Ensemble).unwrap();
        assert_eq!(m.flat_params(), run.ensemble_params.values());
        let wide = ClassBank::new(vec![1.0, 0.0, 0.0], 3, vec!["a".into()]).unwrap();
        assert!(run.classifier(&wide, Weights::Final).is_err());
    }
}
