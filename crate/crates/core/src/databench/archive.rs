//! The EMBA embedding-archive file.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "EMBA"            4 bytes magic
//! 0x01              version byte
//! N, d_in, d, C, M  u32 each
//! features          N·d_in f32, row-major
//! labels            N u32
//! domains           N u32
//! bank rows         C·d f32, row-major
//! class names       C × (u16 byte length, UTF-8 bytes)
//! ```

use std::path::Path;

use crate::binio::{put_len, FormatError, Reader};
use crate::model::{ClassBank, ModelError};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"EMBA";
pub const ARCHIVE_VERSION: u8 = 1;
const HEADER_BYTES: usize = 4 + 1 + 5 * 4;

/// Feature rows with class and domain ids, plus the class prototypes that
/// form the frozen class bank.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_domains: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
    pub domains: Vec<u32>,
    pub prototypes: Vec<f32>,
    pub class_names: Vec<String>,
}

impl EmbeddingArchive {
    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    /// The frozen class bank built from the stored prototype rows.
    pub fn bank(&self) -> Result<ClassBank, ModelError> {
        ClassBank::new(
            self.prototypes.iter().map(|&v| v as f64).collect(),
            self.embed_dim,
            self.class_names.clone(),
        )
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        let n = self.labels.len();
        let c = self.class_names.len();
        if self.input_dim == 0 || self.embed_dim == 0 || c == 0 || self.num_domains == 0 {
            return Err(FormatError::Invalid("zero-sized dimension".into()));
        }
        if self.features.len() != n * self.input_dim || self.domains.len() != n {
            return Err(FormatError::Invalid(format!(
                "{} labels, {} domains, {} feature values for width {}",
                n,
                self.domains.len(),
                self.features.len(),
                self.input_dim
            )));
        }
        if self.prototypes.len() != c * self.embed_dim {
            return Err(FormatError::Invalid(format!(
                "{} prototype values for {c} classes of width {}",
                self.prototypes.len(),
                self.embed_dim
            )));
        }
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= c)
        {
            return Err(FormatError::Invalid(format!(
                "sample {i} has label {l} >= {c}"
            )));
        }
        if let Some((i, m)) = self
            .domains
            .iter()
            .enumerate()
            .find(|(_, &m)| m as usize >= self.num_domains)
        {
            return Err(FormatError::Invalid(format!(
                "sample {i} has domain {m} >= {}",
                self.num_domains
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::Invalid("non-finite feature value".into()));
        }
        if let Some(name) = self
            .class_names
            .iter()
            .find(|s| s.len() > u16::MAX as usize)
        {
            return Err(FormatError::Invalid(format!(
                "class name of {} bytes exceeds u16 length prefix",
                name.len()
            )));
        }
        match self.bank() {
            Ok(_) => Ok(()),
            Err(ModelError::BankNorm { class, norm }) => Err(FormatError::BankNorm { class, norm }),
            Err(e) => Err(FormatError::Invalid(e.to_string())),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FormatError> {
        self.validate()?;
        let mut out = Vec::with_capacity(
            HEADER_BYTES
                + 4 * (self.features.len() + 2 * self.labels.len() + self.prototypes.len()),
        );
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.push(ARCHIVE_VERSION);
        for v in [
            self.num_samples(),
            self.input_dim,
            self.embed_dim,
            self.num_classes(),
            self.num_domains,
        ] {
            put_len(&mut out, v)?;
        }
        self.features
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.labels
            .iter()
            .chain(&self.domains)
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        self.prototypes
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        for name in &self.class_names {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        r.magic(ARCHIVE_MAGIC)?;
        let version = r.u8()?;
        if version != ARCHIVE_VERSION {
            return Err(FormatError::Version {
                found: version,
                supported: ARCHIVE_VERSION,
            });
        }
        let n = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let embed_dim = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let num_domains = r.u32()? as usize;

        let fixed = fixed_size(n, input_dim, embed_dim, classes)
            .ok_or_else(|| FormatError::Invalid("header sizes overflow".into()))?;
        if bytes.len() < fixed {
            return Err(FormatError::Truncated {
                expected: fixed,
                actual: bytes.len(),
            });
        }
        let features = r.f32s(n * input_dim)?;
        let labels = r.u32s(n)?;
        let domains = r.u32s(n)?;
        let prototypes = r.f32s(classes * embed_dim)?;
        let mut class_names = Vec::with_capacity(classes);
        for _ in 0..classes {
            let len = r.u16()? as usize;
            let raw = r.take(len)?;
            let name = std::str::from_utf8(raw)
                .map_err(|e| FormatError::Invalid(format!("class name is not UTF-8: {e}")))?;
            class_names.push(name.to_owned());
        }
        r.finish()?;
        let archive = Self {
            input_dim,
            embed_dim,
            num_domains,
            features,
            labels,
            domains,
            prototypes,
            class_names,
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Byte count of everything up to (not including) the class names.
pub fn fixed_size(n: usize, input_dim: usize, embed_dim: usize, classes: usize) -> Option<usize> {
    let features = n.checked_mul(input_dim)?.checked_mul(4)?;
    let ids = n.checked_mul(8)?;
    let bank = classes.checked_mul(embed_dim)?.checked_mul(4)?;
    HEADER_BYTES
        .checked_add(features)?
        .checked_add(ids)?
        .checked_add(bank)
}
