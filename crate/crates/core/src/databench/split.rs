use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, EmbeddingArchive};

const STREAM_CLASS_SHUFFLE: u64 = 3;
const STREAM_SHOTS: u64 = 4;

/// Which samples an evaluation or training pass draws on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    /// Base classes in the training domains.
    Train,
    /// Base classes in the held-out domain.
    Domain,
    /// New classes in every domain.
    Open,
    /// All classes in the held-out domain.
    Both,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Domain => "domain",
            SplitKind::Open => "open",
            SplitKind::Both => "both",
        }
    }
}

impl std::str::FromStr for SplitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitKind::Train),
            "domain" => Ok(SplitKind::Domain),
            "open" => Ok(SplitKind::Open),
            "both" => Ok(SplitKind::Both),
            other => Err(format!("unknown split '{other}' (train|domain|open|both)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub base_fraction: f64,
    pub test_domain: usize,
    /// Seeds the class shuffle that decides base vs new classes.
    pub seed: u64,
    /// Keep at most this many training samples per (class, domain) cell.
    pub shots: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            base_fraction: 0.5,
            test_domain: 0,
            seed: 0,
            shots: None,
        }
    }
}

/// A materialized subset of archive rows, features widened to `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub input_dim: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    /// Row index of each sample in the source archive.
    pub ids: Vec<usize>,
}

impl Samples {
    pub fn from_archive(archive: &EmbeddingArchive, ids: Vec<usize>) -> Self {
        let mut features = Vec::with_capacity(ids.len() * archive.input_dim);
        for &i in &ids {
            features.extend(archive.feature_row(i).iter().map(|&v| v as f64));
        }
        Self {
            input_dim: archive.input_dim,
            features,
            labels: ids.iter().map(|&i| archive.labels[i] as usize).collect(),
            domains: ids.iter().map(|&i| archive.domains[i] as usize).collect(),
            ids,
        }
    }

    pub fn all(archive: &EmbeddingArchive) -> Self {
        Self::from_archive(archive, (0..archive.num_samples()).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// Copies the given positions (not archive ids) into a new set.
    pub fn select(&self, positions: &[usize]) -> Samples {
        let mut features = Vec::with_capacity(positions.len() * self.input_dim);
        for &p in positions {
            features.extend_from_slice(self.row(p));
        }
        Samples {
            input_dim: self.input_dim,
            features,
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            domains: positions.iter().map(|&p| self.domains[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
        }
    }
}

/// Base/new classes and the four protocol splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub base_classes: Vec<usize>,
    pub new_classes: Vec<usize>,
    pub test_domain: usize,
    pub train: Samples,
    pub test_domain_shift: Samples,
    pub test_open: Samples,
    pub test_both: Samples,
}

impl Splits {
    pub fn get(&self, kind: SplitKind) -> &Samples {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Domain => &self.test_domain_shift,
            SplitKind::Open => &self.test_open,
            SplitKind::Both => &self.test_both,
        }
    }

    /// `mask[c]` is true for base classes.
    pub fn base_mask(&self, num_classes: usize) -> Vec<bool> {
        let mut mask = vec![false; num_classes];
        self.base_classes.iter().for_each(|&c| mask[c] = true);
        mask
    }
}

/// Seeded base/new class partition: the first `floor(C·base_fraction)` ids of
/// a shuffled class list are base classes. Both lists come back sorted.
pub fn partition_classes(
    num_classes: usize,
    base_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(base_fraction > 0.0 && base_fraction < 1.0) {
        return Err(DataError::InvalidSpec(format!(
            "base fraction must lie in (0, 1), got {base_fraction}"
        )));
    }
    let base_count = (num_classes as f64 * base_fraction).floor() as usize;
    if base_count < 1 || base_count >= num_classes {
        return Err(DataError::InvalidSpec(format!(
            "base fraction {base_fraction} leaves {base_count} base of {num_classes} classes"
        )));
    }
    let mut ids: Vec<usize> = (0..num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_CLASS_SHUFFLE);
    ids.shuffle(&mut rng);
    let mut base = ids[..base_count].to_vec();
    let mut new = ids[base_count..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    Ok((base, new))
}

pub fn split(archive: &EmbeddingArchive, cfg: &SplitConfig) -> Result<Splits, DataError> {
    if cfg.test_domain >= archive.num_domains {
        return Err(DataError::TestDomain {
            index: cfg.test_domain,
            domains: archive.num_domains,
        });
    }
    let c = archive.num_classes();
    let (base_classes, new_classes) = partition_classes(c, cfg.base_fraction, cfg.seed)?;
    let mut is_base = vec![false; c];
    base_classes.iter().for_each(|&k| is_base[k] = true);

    let (mut train, mut domain, mut open, mut both) = (vec![], vec![], vec![], vec![]);
    for i in 0..archive.num_samples() {
        let base = is_base[archive.labels[i] as usize];
        let held_out = archive.domains[i] as usize == cfg.test_domain;
        match (base, held_out) {
            (true, false) => train.push(i),
            (true, true) => domain.push(i),
            (false, _) => open.push(i),
        }
        if held_out {
            both.push(i);
        }
    }
    if let Some(shots) = cfg.shots {
        train = subsample_shots(archive, &train, shots, cfg.seed);
    }
    Ok(Splits {
        base_classes,
        new_classes,
        test_domain: cfg.test_domain,
        train: Samples::from_archive(archive, train),
        test_domain_shift: Samples::from_archive(archive, domain),
        test_open: Samples::from_archive(archive, open),
        test_both: Samples::from_archive(archive, both),
    })
}

/// Keeps `shots` random rows per (class, domain) cell, preserving row order.
fn subsample_shots(
    archive: &EmbeddingArchive,
    ids: &[usize],
    shots: usize,
    seed: u64,
) -> Vec<usize> {
    let mut cells: std::collections::BTreeMap<(u32, u32), Vec<usize>> = Default::default();
    for &i in ids {
        cells
            .entry((archive.labels[i], archive.domains[i]))
            .or_default()
            .push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SHOTS);
    let mut kept: Vec<usize> = cells
        .into_values()
        .flat_map(|mut rows| {
            rows.shuffle(&mut rng);
            rows.truncate(shots);
            rows
        })
        .collect();
    kept.sort_unstable();
    kept
}
