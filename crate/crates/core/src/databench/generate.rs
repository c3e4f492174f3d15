use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DataError, EmbeddingArchive};
use crate::model::Lift;

/// Prototypes are redrawn while any pairwise cosine reaches this value.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.9;
const MAX_PROTOTYPE_ATTEMPTS: usize = 1000;

/// Skew generator gain per unit of `domain_strength`. At strength 0.5 the
/// held-out domain costs the untrained model about a sixth of its accuracy
/// while staying far above chance.
const ROTATION_SCALE: f64 = 2.0;

const STREAM_PROTOTYPES: u64 = 0;
const STREAM_DOMAINS: u64 = 1;
const STREAM_SAMPLES: u64 = 2;

/// Synthetic benchmark with `num_domains` shifted domains over `num_classes` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub embed_dim: usize,
    pub input_dim: usize,
    pub samples_per_class_per_domain: usize,
    pub base_fraction: f64,
    pub test_domain: usize,
    pub noise_sigma: f64,
    pub domain_strength: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_domains: 3,
            embed_dim: 32,
            input_dim: 48,
            samples_per_class_per_domain: 50,
            base_fraction: 0.5,
            test_domain: 0,
            noise_sigma: 0.1,
            domain_strength: 0.5,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn num_base_classes(&self) -> usize {
        (self.num_classes as f64 * self.base_fraction).floor() as usize
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::InvalidSpec(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.num_domains < 2 {
            return bad(format!("need at least 2 domains, got {}", self.num_domains));
        }
        if !(self.base_fraction > 0.0 && self.base_fraction < 1.0) {
            return bad(format!(
                "base fraction must lie in (0, 1), got {}",
                self.base_fraction
            ));
        }
        let base = self.num_base_classes();
        if base < 1 || self.num_classes - base < 1 {
            return bad(format!(
                "base fraction {} leaves {base} base of {} classes",
                self.base_fraction, self.num_classes
            ));
        }
        if self.embed_dim == 0 || self.input_dim < self.embed_dim {
            return bad(format!(
                "need 1 <= embed_dim <= input_dim, got {} and {}",
                self.embed_dim, self.input_dim
            ));
        }
        if self.samples_per_class_per_domain == 0 {
            return bad("samples per class per domain must be >= 1".into());
        }
        if self.test_domain >= self.num_domains {
            return Err(DataError::TestDomain {
                index: self.test_domain,
                domains: self.num_domains,
            });
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            ));
        }
        if !(self.domain_strength >= 0.0 && self.domain_strength.is_finite()) {
            return bad(format!(
                "domain strength must be >= 0, got {}",
                self.domain_strength
            ));
        }
        Ok(())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Orthogonal rotation plus offset applied to lifted inputs of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub rotation: DMatrix<f64>,
    pub offset: Vec<f64>,
}

impl DomainTransform {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = self.offset.len();
        (0..n)
            .map(|i| {
                let rotated: f64 = (0..n).map(|j| self.rotation[(i, j)] * x[j]).sum();
                rotated + self.offset[i]
            })
            .collect()
    }
}

fn class_prototypes(spec: &BenchmarkSpec) -> Result<Vec<f32>, DataError> {
    let d = spec.embed_dim;
    let mut rng = stream(spec.seed, STREAM_PROTOTYPES);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut rows = Vec::with_capacity(spec.num_classes * d);
    for _ in 0..spec.num_classes {
        let mut found = None;
        for _ in 0..MAX_PROTOTYPE_ATTEMPTS {
            let v: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let stored: Vec<f32> = v.iter().map(|x| (x / norm) as f32).collect();
            let unit = unit_f64(&stored);
            let crowded = accepted.iter().any(|a| {
                a.iter().zip(&unit).map(|(x, y)| x * y).sum::<f64>() >= MAX_PROTOTYPE_COSINE
            });
            if !crowded {
                found = Some((stored, unit));
                break;
            }
        }
        let Some((stored, unit)) = found else {
            return Err(DataError::Crowded {
                attempts: MAX_PROTOTYPE_ATTEMPTS,
                embed_dim: d,
            });
        };
        rows.extend_from_slice(&stored);
        accepted.push(unit);
    }
    Ok(rows)
}

fn unit_f64(row: &[f32]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn skew(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let scale = 1.0 / (n as f64).sqrt();
    let g = DMatrix::from_fn(n, n, |_, _| normal(rng) * scale);
    (&g - g.transpose()) * 0.5
}

/// Per-domain rotations `Q_m = (I + S_m)⁻¹(I − S_m)` for skew `S_m`, and
/// offsets `b_m`. Each `S_m` and `b_m` mixes a component shared by all
/// domains with a domain-specific one, scaled by `domain_strength`. At
/// strength 0 every transform is exactly the identity.
pub fn domain_transforms(spec: &BenchmarkSpec) -> Vec<DomainTransform> {
    let n = spec.input_dim;
    let mut rng = stream(spec.seed, STREAM_DOMAINS);
    let shared_skew = skew(&mut rng, n);
    let offset_scale = 1.0 / (n as f64).sqrt();
    let shared_offset: Vec<f64> = (0..n).map(|_| normal(&mut rng) * offset_scale).collect();
    let mix = spec.domain_strength / std::f64::consts::SQRT_2;
    (0..spec.num_domains)
        .map(|_| {
            let own_skew = skew(&mut rng, n);
            let own_offset: Vec<f64> = (0..n).map(|_| normal(&mut rng) * offset_scale).collect();
            if spec.domain_strength == 0.0 {
                return DomainTransform {
                    rotation: DMatrix::identity(n, n),
                    offset: vec![0.0; n],
                };
            }
            let s = (&shared_skew + &own_skew) * (mix * ROTATION_SCALE);
            let eye = DMatrix::<f64>::identity(n, n);
            let rotation = (&eye + &s)
                .lu()
                .solve(&(&eye - &s))
                .expect("I + S is invertible for skew-symmetric S");
            let offset = shared_offset
                .iter()
                .zip(&own_offset)
                .map(|(a, b)| (a + b) * mix)
                .collect();
            DomainTransform { rotation, offset }
        })
        .collect()
}

/// Generates `x = Q_m·(P·T_c) + b_m + ε` for every domain, class and draw.
///
/// Rows are ordered domain-major, then class, then draw index.
pub fn generate(spec: &BenchmarkSpec) -> Result<EmbeddingArchive, DataError> {
    spec.validate()?;
    let (c, m, d_in, n) = (
        spec.num_classes,
        spec.num_domains,
        spec.input_dim,
        spec.samples_per_class_per_domain,
    );
    let prototypes = class_prototypes(spec)?;
    let lift = Lift::canonical(d_in, spec.embed_dim)?;
    let transforms = domain_transforms(spec);
    let mut rng = stream(spec.seed, STREAM_SAMPLES);

    let total = m * c * n;
    let mut features = Vec::with_capacity(total * d_in);
    let mut labels = Vec::with_capacity(total);
    let mut domains = Vec::with_capacity(total);
    for (dom, transform) in transforms.iter().enumerate() {
        for class in 0..c {
            let signal: Vec<f64> = prototypes[class * spec.embed_dim..(class + 1) * spec.embed_dim]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let mut clean = lift.apply(&signal);
            if spec.domain_strength != 0.0 {
                clean = transform.apply(&clean);
            }
            for _ in 0..n {
                features.extend(clean.iter().map(|&v| {
                    let noise = if spec.noise_sigma > 0.0 {
                        spec.noise_sigma * normal(&mut rng)
                    } else {
                        0.0
                    };
                    (v + noise) as f32
                }));
                labels.push(class as u32);
                domains.push(dom as u32);
            }
        }
    }
    Ok(EmbeddingArchive {
        input_dim: d_in,
        embed_dim: spec.embed_dim,
        num_domains: m,
        features,
        labels,
        domains,
        prototypes,
        class_names: (0..c).map(|i| format!("class_{i:03}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_degenerate_samples_equal_prototypes() {
        let spec = BenchmarkSpec {
            num_classes: 5,
            embed_dim: 6,
            input_dim: 6,
            samples_per_class_per_domain: 4,
            noise_sigma: 0.0,
            domain_strength: 0.0,
            ..BenchmarkSpec::default()
        };
        let a = generate(&spec).unwrap();
        for i in 0..a.num_samples() {
            let c = a.labels[i] as usize;
            assert_eq!(a.feature_row(i), &a.prototypes[c * 6..(c + 1) * 6]);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = BenchmarkSpec {
            samples_per_class_per_domain: 5,
            seed: 7,
            ..BenchmarkSpec::default()
        };
        let a = generate(&spec).unwrap().to_bytes().unwrap();
        assert_eq!(a, generate(&spec).unwrap().to_bytes().unwrap());
        let other = BenchmarkSpec { seed: 8, ..spec };
        assert_ne!(a, generate(&other).unwrap().to_bytes().unwrap());
    }

    #[test]
    fn rotations_are_orthogonal() {
        let spec = BenchmarkSpec::default();
        for t in domain_transforms(&spec) {
            let q = &t.rotation;
            let err = (q.transpose() * q
                - DMatrix::<f64>::identity(spec.input_dim, spec.input_dim))
            .amax();
            assert!(err < 1e-9, "{err}");
        }
    }

    #[test]
    fn bank_rows_unit_and_separated() {
        let a = generate(&BenchmarkSpec::default()).unwrap();
        let bank = a.bank().unwrap();
        for i in 0..20 {
            let r = unit_f64(&a.prototypes[i * 32..(i + 1) * 32]);
            let n: f64 = a.prototypes[i * 32..(i + 1) * 32]
                .iter()
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            for j in 0..i {
                let s = unit_f64(&a.prototypes[j * 32..(j + 1) * 32]);
                let cos: f64 = r.iter().zip(&s).map(|(x, y)| x * y).sum();
                assert!(cos < MAX_PROTOTYPE_COSINE);
            }
        }
        assert_eq!(bank.num_classes(), 20);
    }

    #[test]
    fn crowded_prototypes_fail_with_advice() {
        let spec = BenchmarkSpec {
            num_classes: 12,
            embed_dim: 2,
            input_dim: 2,
            ..BenchmarkSpec::default()
        };
        let err = generate(&spec).unwrap_err();
        assert!(matches!(
            err,
            DataError::Crowded {
                attempts: 1000,
                embed_dim: 2
            }
        ));
        assert!(err.to_string().contains("increase the embedding dimension"));
    }

    #[test]
    fn spec_validation() {
        let ok = BenchmarkSpec::default();
        assert_eq!(ok.num_base_classes(), 10);
        for bad in [
            BenchmarkSpec {
                num_classes: 1,
                ..ok.clone()
            },
            BenchmarkSpec {
                num_domains: 1,
                ..ok.clone()
            },
            BenchmarkSpec {
                base_fraction: 1.0,
                ..ok.clone()
            },
            BenchmarkSpec {
                num_classes: 3,
                base_fraction: 0.2,
                ..ok.clone()
            },
            BenchmarkSpec {
                input_dim: 16,
                ..ok.clone()
            },
            BenchmarkSpec {
                noise_sigma: -1.0,
                ..ok.clone()
            },
        ] {
            assert!(
                matches!(bad.validate(), Err(DataError::InvalidSpec(_))),
                "{bad:?}"
            );
        }
        let far = BenchmarkSpec {
            test_domain: 3,
            ..ok
        };
        assert!(matches!(
            far.validate(),
            Err(DataError::TestDomain {
                index: 3,
                domains: 3
            })
        ));
    }
}
